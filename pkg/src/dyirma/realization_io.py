"""Tab-separated storage for realizations, prior samples and chain traces.

Every file has a single header row. Segment realization files carry one
column per season and one row per stored MCMC draw; the segment label is the
file stem. Floats are written with 17 significant digits so values survive a
round trip bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError
from .trace import ChainTrace

SUFFIX = ".tsv"


def fmt(x: float) -> str:
    return format(float(x), ".17g")


@dataclass(frozen=True)
class RealizationStore:
    """Stored per-segment draws, ``data[i, m, j]`` in years."""

    data: np.ndarray
    season_labels: tuple[str, ...]
    segment_labels: tuple[str, ...]

    def __post_init__(self):
        d = self.data
        if d.ndim != 3:
            raise FormatError("realization data must be (segments, samples, seasons)")
        if d.shape[0] != len(self.segment_labels) or d.shape[2] != len(self.season_labels):
            raise FormatError("labels do not match data shape")
        if not np.all(np.isfinite(d)) or np.any(d < 0):
            raise ValidationError("realizations must be finite and nonnegative")
        _check_season_order(self.season_labels)

    @property
    def n_segments(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def n_seasons(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class PriorSamples:
    data: np.ndarray
    season_labels: tuple[str, ...] = ()

    def __post_init__(self):
        d = self.data
        if d.ndim != 2:
            raise FormatError("prior samples must be a 2-d array")
        if d.shape[0] < 2:
            raise ValidationError("at least 2 prior samples required")
        if not np.all(np.isfinite(d)) or np.any(d < 0):
            raise ValidationError("prior samples must be finite and nonnegative")

    @property
    def n_samples(self) -> int:
        return self.data.shape[0]

    @property
    def n_seasons(self) -> int:
        return self.data.shape[1]


def _check_season_order(labels):
    try:
        values = [float(s) for s in labels]
    except ValueError:
        return
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ValidationError(f"season labels not strictly increasing: {list(labels)}")


def read_matrix(path, expected_columns: int | None = None) -> tuple[list[str], np.ndarray]:
    """Parse one header + numeric-rows TSV file.

    Raises ``FormatError`` for ragged rows and ``ValidationError`` for
    negative or non-numeric entries, naming the offending 1-based row and
    column (row 1 is the header).
    """
    path = Path(path)
    with open(path) as fh:
        lines = [ln.rstrip("\r\n") for ln in fh]
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        raise FormatError(f"{path}: empty file")
    header = lines[0].split("\t")
    width = len(header)
    if expected_columns is not None and width != expected_columns:
        raise FormatError(f"{path}: header has {width} columns, expected {expected_columns}")
    rows = []
    for r, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        if len(fields) != width:
            raise FormatError(f"{path}: row {r} has {len(fields)} columns, expected {width}")
        vals = []
        for c, text in enumerate(fields, start=1):
            try:
                v = float(text)
            except ValueError:
                raise ValidationError(
                    f"{path}: row {r}, column {c}: non-numeric entry {text!r}") from None
            if not math.isfinite(v):
                raise ValidationError(f"{path}: row {r}, column {c}: non-finite entry {text!r}")
            if v < 0:
                raise ValidationError(f"{path}: row {r}, column {c}: negative time {text}")
            vals.append(v)
        rows.append(vals)
    data = np.array(rows, dtype=float).reshape(len(rows), width)
    return header, data


def write_matrix(path, header, data) -> None:
    with open(path, "w") as fh:
        fh.write("\t".join(header) + "\n")
        for row in np.asarray(data):
            fh.write("\t".join(fmt(v) for v in row) + "\n")


def load_realizations(path, expected_seasons: int, segments=None) -> RealizationStore:
    """Load every ``*.tsv`` in directory ``path`` as one segment.

    Segments are ordered by file name unless ``segments`` lists the stems in
    the desired order.
    """
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"realization directory not found: {path}")
    if segments is None:
        files = sorted(path.glob("*" + SUFFIX))
    else:
        files = [path / f"{s}{SUFFIX}" for s in segments]
    if not files:
        raise FileNotFoundError(f"no {SUFFIX} files in {path}")
    header = None
    blocks = []
    for f in files:
        if not f.exists():
            raise FileNotFoundError(f"realization file not found: {f}")
        h, d = read_matrix(f, expected_seasons)
        if header is None:
            header = h
        elif h != header:
            raise FormatError(f"{f}: season header {h} differs from {header}")
        if blocks and d.shape[0] != blocks[0].shape[0]:
            raise FormatError(
                f"{f}: {d.shape[0]} samples, expected {blocks[0].shape[0]}")
        blocks.append(d)
    if blocks[0].shape[0] == 0:
        raise FormatError(f"{files[0]}: no data rows")
    return RealizationStore(
        data=np.stack(blocks),
        season_labels=tuple(header),
        segment_labels=tuple(f.stem for f in files),
    )


def save_realizations(store: RealizationStore, path) -> list[Path]:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    out = []
    for i, label in enumerate(store.segment_labels):
        f = path / f"{label}{SUFFIX}"
        write_matrix(f, store.season_labels, store.data[i])
        out.append(f)
    return out


def load_prior_samples(path, expected_seasons: int) -> PriorSamples:
    header, data = read_matrix(path, expected_seasons)
    if data.shape[0] < 2:
        raise ValidationError(f"{path}: at least 2 prior samples required")
    return PriorSamples(data=data, season_labels=tuple(header))


def save_prior_samples(prior: PriorSamples, path) -> None:
    labels = prior.season_labels or tuple(f"s{j + 1}" for j in range(prior.n_seasons))
    write_matrix(path, labels, prior.data)


# -- chain traces -----------------------------------------------------------

def trace_columns(kind: str, n: int, J: int) -> list[str]:
    cols = ["iteration"]
    cols += [f"alpha_{i + 1}" for i in range(n)]
    cols += [f"beta_{j + 1}" for j in range(J - 1)]
    cols += [f"gamma_{j + 1}" for j in range(J - 1)]
    if kind == "uns":
        cols += [f"uns_{a + 1}_{b + 1}" for a in range(n) for b in range(a, n)]
    elif kind == "ind":
        cols += ["ind_sigma2"]
    else:
        cols += [f"{kind}_sigma2", f"{kind}_rho"]
    cols += [f"perm_{i + 1}" for i in range(n)]
    cols += [f"sel_{i + 1}" for i in range(n)]
    return cols


def save_trace(trace: ChainTrace, path) -> None:
    """Write one row per retained iteration.

    Permutation positions and selected indices are written 1-based.
    """
    R = len(trace)
    if R == 0:
        raise ValueError("empty trace")
    n, J = trace.n_segments, trace.n_seasons
    cols = trace_columns(trace.kind, n, J)
    iu = np.triu_indices(n)
    with open(path, "w") as fh:
        fh.write("\t".join(cols) + "\n")
        for r in range(R):
            row = [str(int(trace.iteration[r]))]
            row += [fmt(v) for v in trace.alpha[r]]
            row += [fmt(v) for v in trace.beta[r]]
            row += [str(int(v)) for v in trace.gamma[r]]
            if trace.kind == "uns":
                row += [fmt(v) for v in trace.cov[r][iu]]
            else:
                row.append(fmt(trace.sigma2[r]))
                if trace.kind != "ind":
                    row.append(fmt(trace.rho[r]))
            row += [str(int(v) + 1) for v in trace.perm[r]]
            row += [str(int(v) + 1) for v in trace.selected[r]]
            fh.write("\t".join(row) + "\n")


def load_trace(path, chain_id: int = 0) -> ChainTrace:
    path = Path(path)
    with open(path) as fh:
        lines = [ln.rstrip("\r\n") for ln in fh if ln.strip()]
    if len(lines) < 2:
        raise FormatError(f"{path}: empty trace")
    cols = lines[0].split("\t")
    n = sum(c.startswith("alpha_") for c in cols)
    J = sum(c.startswith("beta_") for c in cols) + 1
    cov_cols = [c for c in cols if c.split("_")[0] in ("ind", "cs", "uns", "ar1", "tri")]
    if not cov_cols:
        raise FormatError(f"{path}: no covariance columns")
    kind = cov_cols[0].split("_")[0]
    if cols != trace_columns(kind, n, J):
        raise FormatError(f"{path}: unexpected trace header")
    table = [ln.split("\t") for ln in lines[1:]]
    for r, fields in enumerate(table, start=2):
        if len(fields) != len(cols):
            raise FormatError(f"{path}: row {r} has {len(fields)} columns, expected {len(cols)}")
    arr = np.array(table, dtype=object)

    def block(prefix, dtype):
        idx = [k for k, c in enumerate(cols) if c.startswith(prefix)]
        return arr[:, idx].astype(float).astype(dtype)

    sigma2 = rho = cov = None
    if kind == "uns":
        vals = block("uns_", float)
        R = vals.shape[0]
        cov = np.zeros((R, n, n))
        iu = np.triu_indices(n)
        cov[:, iu[0], iu[1]] = vals
        cov[:, iu[1], iu[0]] = vals
    else:
        sigma2 = block(f"{kind}_sigma2", float)[:, 0]
        if kind != "ind":
            rho = block(f"{kind}_rho", float)[:, 0]
    return ChainTrace(
        kind=kind,
        iteration=block("iteration", np.int64)[:, 0],
        alpha=block("alpha_", float),
        beta=block("beta_", float),
        gamma=block("gamma_", np.int8),
        perm=block("perm_", np.int64) - 1,
        selected=block("sel_", np.int64) - 1,
        sigma2=sigma2,
        rho=rho,
        cov=cov,
        chain_id=chain_id,
    )
