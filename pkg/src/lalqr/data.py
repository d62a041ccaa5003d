"""Transition records and the delimited dataset file format.

A dataset file is plain text::

    # lalqr-dataset v1 env=cartpole n=4 m=1 records=1500
    x0 x1 x2 x3 u0 c xn0 xn1 xn2 xn3
    <one record per line, space separated, 17 significant digits>

17 significant digits make the float64 round trip exact.
"""
from dataclasses import dataclass

import numpy as np

from lalqr.errors import DimensionError

DATASET_MAGIC = "# lalqr-dataset v1"


@dataclass(frozen=True)
class TransitionRecord:
    x: np.ndarray
    u: np.ndarray
    c: float
    x_next: np.ndarray


@dataclass
class Dataset:
    """Column-stacked transitions; row ``i`` is one :class:`TransitionRecord`."""

    x: np.ndarray
    u: np.ndarray
    c: np.ndarray
    x_next: np.ndarray
    env_name: str = ""
    episode: np.ndarray = None

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        u = np.asarray(self.u, dtype=np.float64)
        if u.shape[:1] != self.x.shape[:1] and not (u.ndim == 1 and self.x.shape[0] == 1):
            raise DimensionError("dataset columns have inconsistent lengths")
        self.u = u.reshape(self.x.shape[0], -1)
        self.c = np.asarray(self.c, dtype=np.float64).reshape(-1)
        self.x_next = np.atleast_2d(np.asarray(self.x_next, dtype=np.float64))
        k = self.x.shape[0]
        if self.u.shape[0] != k or self.c.shape[0] != k or self.x_next.shape != self.x.shape:
            raise DimensionError("dataset columns have inconsistent lengths")
        if self.episode is None:
            self.episode = np.zeros(k, dtype=np.int64)

    def __len__(self):
        return self.x.shape[0]

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return TransitionRecord(self.x[idx], self.u[idx], float(self.c[idx]), self.x_next[idx])
        return Dataset(self.x[idx], self.u[idx], self.c[idx], self.x_next[idx], self.env_name, self.episode[idx])

    @property
    def state_dim(self):
        return self.x.shape[1]

    @property
    def control_dim(self):
        return self.u.shape[1]

    @classmethod
    def from_records(cls, records, env_name=""):
        records = list(records)
        return cls(
            np.array([r.x for r in records]),
            np.array([r.u for r in records]),
            np.array([r.c for r in records]),
            np.array([r.x_next for r in records]),
            env_name,
        )

    @classmethod
    def concatenate(cls, parts, env_name=""):
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ValueError("nothing to concatenate")
        return cls(
            np.vstack([p.x for p in parts]),
            np.vstack([p.u for p in parts]),
            np.concatenate([p.c for p in parts]),
            np.vstack([p.x_next for p in parts]),
            env_name or parts[0].env_name,
            np.concatenate([p.episode for p in parts]),
        )

    def split(self, holdout_fraction, rng):
        """Random ``(train, holdout)`` split by record."""
        idx = rng.permutation(len(self))
        cut = len(self) - int(round(holdout_fraction * len(self)))
        return self[np.sort(idx[:cut])], self[np.sort(idx[cut:])]

    def verify(self, env, atol_state=1e-10, atol_cost=1e-12):
        """Indices of records violating ``x_next = step(x, u)`` or ``c = cost(x, u)``."""
        bad = []
        for i in range(len(self)):
            xn = env.step(self.x[i], self.u[i])
            c = env.stage_cost(self.x[i], self.u[i])
            if np.max(np.abs(xn - self.x_next[i])) > atol_state or abs(c - self.c[i]) > atol_cost:
                bad.append(i)
        return bad


def save_dataset(path, data):
    n, m = data.state_dim, data.control_dim
    header = f"{DATASET_MAGIC} env={data.env_name or 'unknown'} n={n} m={m} records={len(data)}\n"
    cols = [f"x{i}" for i in range(n)] + [f"u{i}" for i in range(m)] + ["c"] + [f"xn{i}" for i in range(n)]
    table = np.hstack([data.x, data.u, data.c[:, None], data.x_next])
    with open(path, "w") as fh:
        fh.write(header)
        fh.write(" ".join(cols) + "\n")
        np.savetxt(fh, table, fmt="%.17g")


def load_dataset(path):
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith(DATASET_MAGIC):
            raise ValueError(f"{path}: missing dataset header")
        fields = dict(tok.split("=", 1) for tok in header[len(DATASET_MAGIC):].split())
        fh.readline()
        table = np.loadtxt(fh, ndmin=2)
    n, m = int(fields["n"]), int(fields["m"])
    if table.size == 0:
        table = np.zeros((0, 2 * n + m + 1))
    if table.shape[1] != 2 * n + m + 1:
        raise DimensionError(f"{path}: expected {2 * n + m + 1} columns, found {table.shape[1]}")
    env_name = fields.get("env", "")
    return Dataset(table[:, :n], table[:, n:n + m], table[:, n + m], table[:, n + m + 1:], env_name)
