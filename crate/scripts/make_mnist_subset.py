"""Build the 1k/1k MNIST subset in data/ from the npm `mnist` package (1.1.0).

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 scripts/make_mnist_subset.py package/src/digits data

Per digit, the first 100 images go to train and the next 100 to test.
Both sets are shuffled with random.Random(7) and gzipped with mtime 0 so
the output is byte-reproducible.
"""

import gzip
import json
import random
import struct
import sys
from pathlib import Path


def write(out: Path, name: str, items) -> None:
    with gzip.GzipFile(out / f"{name}-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, len(items), 28, 28))
        f.write(bytes(max(0, min(255, round(v * 255))) for im, _ in items for v in im))
    with gzip.GzipFile(out / f"{name}-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, len(items)))
        f.write(bytes(label for _, label in items))


def main() -> None:
    digits_dir, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    train, test = [], []
    for d in range(10):
        raw = json.loads((digits_dir / f"{d}.json").read_text())["data"]
        images = [raw[i * 784:(i + 1) * 784] for i in range(len(raw) // 784)]
        train += [(im, d) for im in images[:100]]
        test += [(im, d) for im in images[100:200]]
    rng = random.Random(7)
    rng.shuffle(train)
    rng.shuffle(test)
    write(out, "mnist1k-train", train)
    write(out, "mnist1k-test", test)


if __name__ == "__main__":
    main()
