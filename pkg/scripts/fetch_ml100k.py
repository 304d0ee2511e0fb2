"""Extract MovieLens 100K into data/ml-100k.inter.

The GroupLens archive is preferred; when it is unreachable the copy bundled
in the ``recbole`` wheel (same u.data rows plus a header line) is used.
"""

import io
import subprocess
import sys
import tempfile
import urllib.request
import zipfile
from pathlib import Path

GROUPLENS = "https://files.grouplens.org/datasets/movielens/ml-100k.zip"
OUT = Path(__file__).resolve().parents[1] / "data" / "ml-100k.inter"
HEADER = "user_id:token\titem_id:token\trating:float\ttimestamp:float\n"


def from_grouplens() -> bytes:
    with urllib.request.urlopen(GROUPLENS, timeout=20) as resp:
        archive = zipfile.ZipFile(io.BytesIO(resp.read()))
    return HEADER.encode() + archive.read("ml-100k/u.data")


def from_recbole() -> bytes:
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "recbole==1.2.1", "--no-deps", "-d", tmp, "-q"],
            check=True,
        )
        wheel = next(Path(tmp).glob("recbole-*.whl"))
        return zipfile.ZipFile(wheel).read("recbole/dataset_example/ml-100k/ml-100k.inter")


def main():
    if OUT.exists():
        print(f"{OUT} already present")
        return
    try:
        data = from_grouplens()
    except OSError as exc:
        print(f"GroupLens download failed ({exc}); falling back to the recbole wheel")
        data = from_recbole()
    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_bytes(data)
    lines = data.count(b"\n") - 1
    print(f"wrote {OUT} ({lines} interactions)")


if __name__ == "__main__":
    main()
