"""Write the 5,000-digit MNIST subset bundled with mlxtend as an IDX directory.

The result loads like a regular MNIST download:

    python3 demos/mnist_subset_to_idx.py /tmp/mnist5k
    dier train --data /tmp/mnist5k --nano --epochs 5 --out runs/mnist
"""
import gzip
import importlib.util
import sys
from pathlib import Path

import numpy as np

from dier.data import write_idx_split

out = Path(sys.argv[1] if len(sys.argv) > 1 else "mnist5k")
found = importlib.util.find_spec("mlxtend")
if found is None:
    sys.exit("mlxtend is not installed (pip install --no-deps mlxtend)")
src = Path(found.submodule_search_locations[0]) / "data" / "data" / "mnist_5k.csv.gz"
rows = np.loadtxt(gzip.open(src), delimiter=",")  # 784 pixels then the label
n_train, n_test = write_idx_split(rows[:, :784].reshape(-1, 28, 28), rows[:, -1].astype(int), out,
                                  test_count=1000, seed=0)
print(f"wrote {n_train} train / {n_test} test digits to {out}")
