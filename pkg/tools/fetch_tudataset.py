"""Download TUDataset archives into the data directory.

    python3 tools/fetch_tudataset.py MUTAG PROTEINS [--data-dir DIR]
"""
import argparse
import io
import sys
import urllib.request
import zipfile
from pathlib import Path

URL = "https://www.chrsmrrs.com/graphkerneldatasets/{name}.zip"


def fetch(name: str, data_dir: Path) -> Path:
    with urllib.request.urlopen(URL.format(name=name), timeout=60) as resp:
        payload = resp.read()
    with zipfile.ZipFile(io.BytesIO(payload)) as zf:
        zf.extractall(data_dir)
    return data_dir / name


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("names", nargs="+")
    parser.add_argument("--data-dir", type=Path, default=Path(__file__).resolve().parents[1] / "data")
    args = parser.parse_args(argv)
    args.data_dir.mkdir(parents=True, exist_ok=True)
    for name in args.names:
        try:
            print(fetch(name, args.data_dir))
        except OSError as exc:
            print(f"could not fetch {name}: {exc}", file=sys.stderr)
            return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
