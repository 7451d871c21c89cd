"""Hierarchical panels: file I/O, preprocessing, a synthetic generator,
training-window construction and missing-value masking."""
from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    DataError,
    EmptyWindowSetError,
    NonMonotoneTimeError,
    ParseError,
    ShapeMismatchError,
    UnknownNodeError,
    ZeroVarianceLeafError,
)
from .hierarchy import Hierarchy, aggregate_matrix_bottom_up, build_hierarchy

PREPROCESS_MODES = ("sum", "none")


@dataclass(frozen=True)
class TimeSeriesPanel:
    """``N x T`` values with an observation mask and normalisation metadata.

    Normalised values relate to the original scale through
    ``original = value * scale + offset`` per node. Leaves carry their
    training mean/std there, internal nodes their child count.
    """

    values: np.ndarray
    mask: np.ndarray
    node_names: tuple[str, ...]
    offset: np.ndarray = None
    scale: np.ndarray = None
    phi_rescaled: bool = False
    preprocessed: bool = False

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        if values.ndim != 2 or values.shape != mask.shape:
            raise ShapeMismatchError("values and mask must be matching N x T arrays")
        if values.shape[1] < 2:
            raise DataError("panel needs at least two time steps")
        if not np.all(np.isfinite(values[mask])):
            raise DataError("observed values must be finite")
        n = values.shape[0]
        offset = np.zeros(n) if self.offset is None else np.asarray(self.offset, float)
        scale = np.ones(n) if self.scale is None else np.asarray(self.scale, float)
        if np.any(scale <= 0):
            raise DataError("normalisation scales must be positive")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "offset", offset)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "node_names", tuple(self.node_names))

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def T(self) -> int:
        return self.values.shape[1]

    @property
    def normalization(self) -> dict:
        return {"offset": self.offset.tolist(), "scale": self.scale.tolist()}

    def truncate(self, t_end: int) -> "TimeSeriesPanel":
        """Keep time steps ``0 .. t_end - 1``."""
        return replace(self, values=self.values[:, :t_end].copy(), mask=self.mask[:, :t_end].copy())

    def filled_values(self) -> np.ndarray:
        """Values with unobserved cells forward-filled (back-filled at the start)."""
        out = np.where(self.mask, self.values, np.nan)
        for row in out:
            ok = np.flatnonzero(np.isfinite(row))
            if ok.size == 0:
                row[:] = 0.0
                continue
            idx = np.maximum.accumulate(np.where(np.isfinite(row), np.arange(row.size), -1))
            idx[idx < 0] = ok[0]
            row[:] = row[idx]
        return out

    def to_original(self, x, axis: int = -1):
        """Map normalised node values (node axis ``axis``) back to original scale."""
        x = np.asarray(x, float)
        shape = [1] * x.ndim
        shape[axis] = self.n_nodes
        return x * self.scale.reshape(shape) + self.offset.reshape(shape)

    def inverse_transform(self) -> np.ndarray:
        return self.to_original(self.values, axis=0)

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["node", "time", "value"])
        for i in range(self.n_nodes):
            for t in np.flatnonzero(self.mask[i]):
                writer.writerow([self.node_names[i], int(t), repr(float(self.values[i, t]))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(np.where(self.mask, self.values, 0.0)).tobytes())
        h.update(self.mask.tobytes())
        return h.hexdigest()[:16]


def parse_panel_csv(text: str, hierarchy: Hierarchy) -> TimeSeriesPanel:
    rows = csv.reader(io.StringIO(text))
    header = next(rows, None)
    if header is None or [s.strip() for s in header] != ["node", "time", "value"]:
        raise ParseError("panel file must start with header node,time,value")
    index = {name: k for k, name in enumerate(hierarchy.node_names)}
    cells: list[tuple[int, int, float]] = []
    last_time: dict[int, int] = {}
    for lineno, row in enumerate(rows, start=2):
        if not row or all(not s.strip() for s in row):
            continue
        if len(row) != 3:
            raise ParseError(f"line {lineno}: expected 3 fields, got {len(row)}")
        name, t_raw, v_raw = (s.strip() for s in row)
        if name not in index:
            raise UnknownNodeError(f"line {lineno}: node {name!r} is not in the hierarchy")
        try:
            t = int(t_raw)
            v = float(v_raw)
        except ValueError as exc:
            raise ParseError(f"line {lineno}: cannot parse {row!r}") from exc
        if t < 0:
            raise ParseError(f"line {lineno}: negative time {t}")
        if not math.isfinite(v):
            raise ParseError(f"line {lineno}: non-finite value")
        k = index[name]
        if k in last_time and t <= last_time[k]:
            raise NonMonotoneTimeError(f"line {lineno}: time {t} for node {name!r} is not increasing")
        last_time[k] = t
        cells.append((k, t, v))
    absent = [hierarchy.node_names[k] for k in range(hierarchy.n_nodes) if k not in last_time]
    if absent:
        raise DataError(f"nodes without any rows: {absent[:10]}")
    T = max(last_time.values()) + 1
    values = np.full((hierarchy.n_nodes, T), np.nan)
    mask = np.zeros((hierarchy.n_nodes, T), dtype=bool)
    for k, t, v in cells:
        values[k, t] = v
        mask[k, t] = True
    return TimeSeriesPanel(values, mask, hierarchy.node_names)


def load_panel(path: str | Path, hierarchy: Hierarchy) -> TimeSeriesPanel:
    return parse_panel_csv(Path(path).read_text(encoding="utf-8"), hierarchy)


def preprocess(
    panel: TimeSeriesPanel,
    hierarchy: Hierarchy,
    mode: str = "sum",
    train_end: int | None = None,
) -> tuple[TimeSeriesPanel, Hierarchy]:
    """Normalise a raw panel for training.

    ``mode="sum"`` z-scores every leaf with statistics from time steps
    ``< train_end``, divides each internal series by its number of children
    and rescales the hierarchy weights to ``1 / |C_i|``. ``mode="none"`` is
    for panels that are already on a common scale and only marks the panel
    as preprocessed.
    """
    if panel.preprocessed:
        raise DataError("panel is already preprocessed")
    if panel.n_nodes != hierarchy.n_nodes:
        raise ShapeMismatchError("panel and hierarchy node counts differ")
    if mode not in PREPROCESS_MODES:
        raise ValueError(f"unknown preprocess mode {mode!r}; expected one of {PREPROCESS_MODES}")
    if mode == "none":
        return replace(panel, preprocessed=True), hierarchy

    train_end = panel.T if train_end is None else int(train_end)
    offset = np.zeros(panel.n_nodes)
    scale = np.ones(panel.n_nodes)
    for i in hierarchy.nodes:
        k = i - 1
        if hierarchy.is_leaf(i):
            obs = panel.values[k, :train_end][panel.mask[k, :train_end]]
            sd = obs.std(ddof=1) if obs.size >= 2 else 0.0
            if not sd > 0:
                raise ZeroVarianceLeafError(f"leaf {panel.node_names[k]!r} has zero variance")
            offset[k], scale[k] = obs.mean(), sd
        else:
            scale[k] = float(len(hierarchy.children[i]))
    values = (panel.values - offset[:, None]) / scale[:, None]
    new_h = hierarchy.with_weights(
        {(p, c): 1.0 / len(hierarchy.children[p]) for p, c, _ in hierarchy.edges}
    )
    out = replace(
        panel, values=values, offset=offset, scale=scale, phi_rescaled=True, preprocessed=True
    )
    return out, new_h


def synthetic_tree(n_leaves: int, depth: int) -> Hierarchy:
    """Balanced tree with ``depth`` levels, ``n_leaves`` leaves and mean-aggregation weights."""
    sizes = [1]
    for d in range(1, depth):
        s = int(round(n_leaves ** (d / (depth - 1))))
        sizes.append(min(max(s, sizes[-1]), n_leaves))
    sizes[-1] = n_leaves
    edges, next_id, prev = [], 2, [1]
    for d in range(1, depth):
        ids = list(range(next_id, next_id + sizes[d]))
        next_id += sizes[d]
        for parent, group in zip(prev, np.array_split(np.asarray(ids), len(prev))):
            for c in group:
                edges.append((parent, int(c), 1.0 / len(group)))
        prev = ids
    return build_hierarchy(edges)


def generate_synthetic(
    n_leaves: int = 8,
    depth: int = 3,
    T: int = 200,
    consistency: str = "strong",
    leaf_noise_std: float = 0.1,
    seed: int = 0,
    period: int = 12,
) -> tuple[Hierarchy, TimeSeriesPanel]:
    """Seasonal + trend + AR(1) leaves aggregated up a balanced tree.

    ``consistency="weak"`` adds independent N(0, leaf_noise_std^2) noise to
    every node after aggregation. Panels are already on a unit scale, so
    ``preprocess(mode="none")`` is the matching preprocessing.
    """
    if n_leaves < 2 or depth < 2 or T < 20:
        raise ValueError("need n_leaves >= 2, depth >= 2 and T >= 20")
    if consistency not in ("strong", "weak"):
        raise ValueError("consistency must be 'strong' or 'weak'")
    h = synthetic_tree(n_leaves, depth)
    rng = np.random.default_rng(seed)
    t = np.arange(T)
    seasonal = np.sin(2 * np.pi * t / period) + 0.3 * np.sin(4 * np.pi * t / period)
    leaves = h.leaves
    values = np.zeros((h.n_nodes, T))
    for i in leaves:
        amp = rng.uniform(0.5, 1.5)
        slope = rng.uniform(-1.0, 1.0)
        level = rng.normal(0.0, 0.5)
        phi = rng.uniform(0.5, 0.9)
        eps = rng.normal(0.0, 0.3, size=T)
        ar = np.zeros(T)
        for s in range(1, T):
            ar[s] = phi * ar[s - 1] + eps[s]
        values[i - 1] = level + amp * seasonal + slope * (t / T) + ar
    values = aggregate_matrix_bottom_up(h, values)
    noise = rng.normal(0.0, 1.0, size=values.shape)
    if consistency == "weak":
        values = values + leaf_noise_std * noise
    panel = TimeSeriesPanel(values, np.ones_like(values, dtype=bool), h.node_names)
    return h, panel


@dataclass(frozen=True)
class WindowSet:
    """Training windows shared by all nodes.

    Window ``w`` feeds every node its slice ``t1[w] .. t2[w]`` (inclusive)
    and targets ``t2[w] + tau``. ``target_mask[w, k]`` is False where node
    ``k``'s target is unobserved; those (node, window) items are skipped.
    """

    t1: np.ndarray
    t2: np.ndarray
    target_mask: np.ndarray
    tau: int
    inputs: np.ndarray = field(repr=False)
    targets: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return int(self.target_mask.sum())

    @property
    def n_windows(self) -> int:
        return len(self.t1)

    @property
    def items(self):
        """Per-node items ``(node_id, input_slice, target, t1, t2)``."""
        for w in range(self.n_windows):
            a, b = int(self.t1[w]), int(self.t2[w])
            for k in np.flatnonzero(self.target_mask[w]):
                yield (int(k) + 1, self.inputs[k, a : b + 1], float(self.targets[k, b + self.tau]), a, b)

    def batch(self, idx):
        """Padded arrays for windows ``idx``.

        Returns inputs ``(B, N, L)`` (right-padded with zeros), lengths
        ``(B,)``, targets ``(B, N)`` and target mask ``(B, N)``.
        """
        idx = np.asarray(idx)
        t1, t2 = self.t1[idx], self.t2[idx]
        lengths = t2 - t1 + 1
        L = int(lengths.max())
        n = self.inputs.shape[0]
        x = np.zeros((len(idx), n, L))
        for b, (a, e) in enumerate(zip(t1, t2)):
            x[b, :, : e - a + 1] = self.inputs[:, a : e + 1]
        y = self.targets[:, t2 + self.tau].T
        m = self.target_mask[idx]
        return x, lengths, np.where(m, y, 0.0), m


def make_windows(
    panel: TimeSeriesPanel,
    tau: int,
    min_len: int = 5,
    t_max: int | None = None,
    max_len: int | None = None,
) -> WindowSet:
    """All windows ``(t1, t2)`` with ``t2 <= t_max``, length in
    ``[min_len, max_len]`` and target index ``t2 + tau`` inside the panel."""
    if tau < 1:
        raise ValueError("tau must be >= 1")
    min_len = max(1, int(min_len))
    last = panel.T - 1 - tau
    if t_max is not None:
        last = min(last, int(t_max))
    t1s, t2s = [], []
    for t2 in range(min_len - 1, last + 1):
        lo = 0 if max_len is None else max(0, t2 - int(max_len) + 1)
        for t1 in range(lo, t2 - min_len + 2):
            t1s.append(t1)
            t2s.append(t2)
    t1 = np.asarray(t1s, dtype=int)
    t2 = np.asarray(t2s, dtype=int)
    target_mask = panel.mask[:, t2 + tau].T if t2.size else np.zeros((0, panel.n_nodes), bool)
    keep = target_mask.any(axis=1)
    t1, t2, target_mask = t1[keep], t2[keep], target_mask[keep]
    if t1.size == 0:
        raise EmptyWindowSetError(f"no windows for tau={tau}, min_len={min_len}, T={panel.T}")
    targets = np.where(panel.mask, panel.values, 0.0)
    return WindowSet(t1, t2, target_mask, int(tau), panel.filled_values(), targets)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def mask_hfmv(panel: TimeSeriesPanel, rho: int, k_percent: float, seed: int) -> TimeSeriesPanel:
    """Hide ``round(k% * N * rho)`` uniformly chosen cells among the last ``rho`` steps.

    For a fixed seed the masked sets are nested in ``k``: the cells hidden
    at a smaller percentage are also hidden at a larger one.
    """
    if rho < 1:
        raise ValueError("rho must be >= 1")
    if not 0 <= k_percent <= 100:
        raise ValueError("k_percent must be in [0, 100]")
    if k_percent == 0:
        return panel
    rho = min(int(rho), panel.T)
    start = panel.T - rho
    cells = [(k, t) for t in range(start, panel.T) for k in range(panel.n_nodes)]
    m = _round_half_up(k_percent / 100.0 * len(cells))
    order = np.random.default_rng(seed).permutation(len(cells))[:m]
    mask = panel.mask.copy()
    values = panel.values.copy()
    for c in order:
        k, t = cells[c]
        mask[k, t] = False
        values[k, t] = np.nan
    return replace(panel, values=values, mask=mask)


def apply_normalization(
    panel: TimeSeriesPanel, hierarchy: Hierarchy, offset, scale, mode: str
) -> tuple[TimeSeriesPanel, Hierarchy]:
    """Normalise a raw panel with statistics stored from training."""
    if mode not in PREPROCESS_MODES:
        raise ValueError(f"unknown preprocess mode {mode!r}")
    offset, scale = np.asarray(offset, float), np.asarray(scale, float)
    if offset.shape != (panel.n_nodes,) or scale.shape != (panel.n_nodes,):
        raise ShapeMismatchError("normalisation metadata does not match the panel")
    if mode == "none":
        return replace(panel, offset=offset, scale=scale, preprocessed=True), hierarchy
    values = (panel.values - offset[:, None]) / scale[:, None]
    new_h = hierarchy.with_weights(
        {(p, c): 1.0 / len(hierarchy.children[p]) for p, c, _ in hierarchy.edges}
    )
    return replace(
        panel, values=values, offset=offset, scale=scale, phi_rescaled=True, preprocessed=True
    ), new_h
