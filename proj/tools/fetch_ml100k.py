#!/usr/bin/env python3
"""Rebuild the GroupLens MovieLens 100K files (u.data, u.item) from the copy
bundled inside the RecBole wheel.

Use this when files.grouplens.org is unreachable but a PyPI mirror is. The
ratings are copied verbatim; u.item is regenerated with the standard 19 genre
flags (unknown first) so the output parses exactly like the original.

    python3 tools/fetch_ml100k.py data/ml-100k
"""
import argparse
import pathlib
import subprocess
import sys
import tempfile
import zipfile

GENRES = [
    "unknown", "Action", "Adventure", "Animation", "Children's", "Comedy",
    "Crime", "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror",
    "Musical", "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
]
PREFIX = "recbole/dataset_example/ml-100k/ml-100k"


def find_wheel(workdir: pathlib.Path, wheel: str | None) -> pathlib.Path:
    if wheel:
        return pathlib.Path(wheel)
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "recbole==1.2.1", "--no-deps",
         "-d", str(workdir)],
        check=True, stdout=subprocess.DEVNULL)
    return next(workdir.glob("recbole-*.whl"))


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out_dir")
    ap.add_argument("--wheel", help="use an already downloaded recbole wheel")
    args = ap.parse_args()

    out = pathlib.Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        whl = find_wheel(pathlib.Path(tmp), args.wheel)
        with zipfile.ZipFile(whl) as z:
            inter = z.read(PREFIX + ".inter").decode("utf-8").splitlines()
            items = z.read(PREFIX + ".item").decode("latin-1").splitlines()

    with open(out / "u.data", "w", newline="\n") as f:
        for line in inter[1:]:
            user, item, rating, ts = line.split("\t")
            f.write(f"{user}\t{item}\t{int(float(rating))}\t{int(float(ts))}\n")

    with open(out / "u.item", "w", encoding="latin-1", newline="\n") as f:
        for line in items[1:]:
            item, title, year, classes = line.split("\t")
            present = set(classes.split())
            unknown = [g for g in present if g not in GENRES]
            if unknown:
                raise SystemExit(f"item {item}: unexpected genres {unknown}")
            flags = "|".join("1" if g in present else "0" for g in GENRES)
            label = f"{title} ({year})" if year else title
            f.write(f"{item}|{label}|||{flags}\n")
    print(f"wrote {len(inter) - 1} ratings and {len(items) - 1} items to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
