"""Downstream evaluation of frozen embeddings.

Few-shot regression probes predict each observation's primary stellar
parameter (the log-period driver, theta[0]) from one representation at a
time: raw flux, the stellar latent, the instrument latent, or the
single-latent baseline. The same probe architecture is fit for every
representation so only the features differ. A linear softmax probe
measures how much instrument identity leaks into each space, and a
deterministic 2D PCA provides the qualitative clustering picture.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import storage
from .errors import DataError
from .model import DualModel, encode
from .nncore import Mlp, MlpSpec, AdamState, adam_step, mlp_backward, mlp_forward
from .rng import stream
from .simgen import Dataset

EMBEDDING_MAGIC = b"CDEM"
EMBEDDING_VERSION = 1

PROBE_HIDDEN = 32
PROBE_EPOCHS = 200
PROBE_LR = 0.001
PROBE_BATCH = 200
DEFAULT_TRAIN_SIZES = (10, 30, 100, 300, 1000)
DEFAULT_N_RUNS = 5


@dataclass
class EmbeddingTable:
    obs_ids: np.ndarray
    star_ids: np.ndarray
    instrument_ids: np.ndarray
    z_star: np.ndarray | None = None
    z_instr: np.ndarray | None = None
    z_baseline: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.obs_ids)
        for name in ("star_ids", "instrument_ids"):
            if len(getattr(self, name)) != n:
                raise DataError(f"{name} length != number of rows")
        for name in ("z_star", "z_instr", "z_baseline"):
            z = getattr(self, name)
            if z is not None and z.shape[0] != n:
                raise DataError(f"{name} row count != number of rows")

    @property
    def n_rows(self) -> int:
        return len(self.obs_ids)

    def representation(self, name: str) -> np.ndarray:
        z = getattr(self, name, None)
        if z is None:
            raise DataError(f"embedding table has no {name!r} columns")
        return z

    def merged_with(self, other: "EmbeddingTable") -> "EmbeddingTable":
        if not np.array_equal(self.obs_ids, other.obs_ids):
            raise DataError("cannot merge embedding tables over different observations")
        return EmbeddingTable(
            obs_ids=self.obs_ids,
            star_ids=self.star_ids,
            instrument_ids=self.instrument_ids,
            z_star=self.z_star if self.z_star is not None else other.z_star,
            z_instr=self.z_instr if self.z_instr is not None else other.z_instr,
            z_baseline=self.z_baseline if self.z_baseline is not None else other.z_baseline,
        )


@dataclass(frozen=True)
class ProbeResult:
    representation: str
    train_size: int
    r2_mean: float
    r2_std: float
    n_runs: int

    def __post_init__(self):
        if self.n_runs < 2:
            raise DataError("n_runs must be >= 2")
        if self.r2_mean > 1.0 + 1e-12:
            raise DataError("r2_mean cannot exceed 1")


@dataclass(frozen=True)
class LeakageResult:
    representation: str
    accuracies: tuple
    mean_accuracy: float
    std_accuracy: float


def embed_dataset(model, dataset: Dataset, chunk: int = 512) -> EmbeddingTable:
    """Deterministic embeddings for every observation; projection heads unused."""
    t_len = dataset.config.n_timesteps
    if model.cfg.t_len != t_len:
        raise DataError(f"model expects {model.cfg.t_len} timesteps, dataset has {t_len}")
    n = dataset.n_obs
    obs_ids = np.array([o.obs_id for o in dataset.observations], dtype=np.int64)
    star_ids = np.array([o.star_id for o in dataset.observations], dtype=np.int64)
    inst_ids = np.array([o.instrument_id for o in dataset.observations], dtype=np.int64)
    outputs = []
    for start in range(0, n, chunk):
        rows = dataset.flux_rows(range(start, min(start + chunk, n)))
        outputs.append(encode(model, rows))
    if isinstance(model, DualModel):
        z_star = np.concatenate([o[0] for o in outputs])
        z_instr = np.concatenate([o[1] for o in outputs])
        return EmbeddingTable(obs_ids, star_ids, inst_ids, z_star=z_star, z_instr=z_instr)
    z = np.concatenate(outputs)
    return EmbeddingTable(obs_ids, star_ids, inst_ids, z_baseline=z)


def save_embeddings(table: EmbeddingTable, path) -> None:
    arrays = {
        "obs_ids": table.obs_ids,
        "star_ids": table.star_ids,
        "instrument_ids": table.instrument_ids,
    }
    spaces = []
    for name in ("z_star", "z_instr", "z_baseline"):
        z = getattr(table, name)
        if z is not None:
            arrays[name] = z
            spaces.append(name)
    storage.save_container(path, EMBEDDING_MAGIC, EMBEDDING_VERSION, {"spaces": spaces}, arrays)


def load_embeddings(path) -> EmbeddingTable:
    header, arrays = storage.load_container(path, EMBEDDING_MAGIC, EMBEDDING_VERSION)
    return EmbeddingTable(
        obs_ids=arrays["obs_ids"],
        star_ids=arrays["star_ids"],
        instrument_ids=arrays["instrument_ids"],
        z_star=arrays.get("z_star"),
        z_instr=arrays.get("z_instr"),
        z_baseline=arrays.get("z_baseline"),
    )


# ---------------------------------------------------------------------------
# probes


def r_squared(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    """1 - SS_res / SS_tot against the true-label mean."""
    y_true = np.asarray(y_true, dtype=np.float64).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=np.float64).reshape(-1)
    if y_true.shape != y_pred.shape:
        raise DataError("r_squared inputs must have equal length")
    ss_tot = float(np.sum((y_true - y_true.mean()) ** 2))
    if ss_tot == 0.0:
        raise DataError("degenerate label variance")
    ss_res = float(np.sum((y_true - y_pred) ** 2))
    return 1.0 - ss_res / ss_tot


def _standardizer(x_train: np.ndarray):
    mu = x_train.mean(axis=0)
    sigma = x_train.std(axis=0)
    sigma = np.where(sigma < 1e-12, 1.0, sigma)
    return lambda x: (x - mu) / sigma


def fit_mlp_regressor(
    features: np.ndarray,
    targets: np.ndarray,
    rng: np.random.Generator,
    hidden: int = PROBE_HIDDEN,
    epochs: int = PROBE_EPOCHS,
    lr: float = PROBE_LR,
    batch_size: int = PROBE_BATCH,
):
    """Minibatch Adam fit of a one-hidden-layer regressor; returns predict(X).

    Two choices keep the few-shot regime meaningful. The output layer
    starts at zero and targets are centered on the training mean, so the
    untrained probe predicts that mean instead of a random function.
    Batches are min(batch_size, n) rows reshuffled per epoch, so large
    training pools get proportionally more optimizer steps out of the
    same epoch budget instead of 200 under-converged full-batch steps.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64).reshape(-1, 1)
    y_center = float(y.mean())
    y = y - y_center
    net = Mlp(MlpSpec((x.shape[1], hidden, 1), "relu", "none"), rng)
    net.weights[-1].values[...] = 0.0
    net.biases[-1].values[...] = 0.0
    adam = AdamState(lr=lr)
    params = net.params()
    n = x.shape[0]
    bs = min(batch_size, n)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            pred, cache = mlp_forward(net, x[idx])
            mlp_backward(cache, 2.0 * (pred - y[idx]) / len(idx))
            adam_step(adam, params)

    def predict(xq):
        out, _ = mlp_forward(net, np.asarray(xq, dtype=np.float64))
        return out.reshape(-1) + y_center

    return predict


def probe_regression(
    features: np.ndarray,
    labels: np.ndarray,
    star_ids: np.ndarray,
    *,
    representation: str,
    test_stars,
    train_sizes=DEFAULT_TRAIN_SIZES,
    n_runs: int = DEFAULT_N_RUNS,
    seed: int = 0,
    hidden: int = PROBE_HIDDEN,
    epochs: int = PROBE_EPOCHS,
    lr: float = PROBE_LR,
) -> list:
    """Few-shot R-squared of an MLP probe across training-pool sizes.

    The test set is every observation of ``test_stars`` and is fixed
    across runs and train sizes; probe training pools come from the
    remaining stars, so train/test are star-disjoint by construction
    (re-checked per run). Features are standardized with the unlabeled
    pool's statistics, which is label-free, identical across
    representations, and avoids the degenerate scalings a 10-row
    subsample can produce.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    star_ids = np.asarray(star_ids)
    test_stars = set(int(s) for s in test_stars)
    test_mask = np.array([s in test_stars for s in star_ids])
    test_idx = np.flatnonzero(test_mask)
    pool_idx = np.flatnonzero(~test_mask)
    if len(test_idx) == 0 or len(pool_idx) == 0:
        raise DataError("probe needs non-empty test set and training pool")
    y_test = labels[test_idx]
    if np.allclose(y_test.std(), 0.0):
        raise DataError("degenerate label variance in test set")
    transform = _standardizer(features[pool_idx])

    results = []
    for size in train_sizes:
        if size > len(pool_idx):
            raise DataError(f"train_size {size} exceeds probe pool of {len(pool_idx)}")
        scores = []
        for run in range(n_runs):
            rng = stream(seed, "probe", representation, int(size), run)
            take = rng.choice(len(pool_idx), size=size, replace=False)
            sub = pool_idx[take]
            overlap = set(star_ids[sub].tolist()) & test_stars
            if overlap:
                raise DataError(f"probe subsample shares stars with test set: {sorted(overlap)}")
            predict = fit_mlp_regressor(
                transform(features[sub]), labels[sub], rng, hidden=hidden, epochs=epochs, lr=lr
            )
            scores.append(r_squared(y_test, predict(transform(features[test_idx]))))
        results.append(
            ProbeResult(
                representation=representation,
                train_size=int(size),
                r2_mean=float(np.mean(scores)),
                r2_std=float(np.std(scores, ddof=1)),
                n_runs=n_runs,
            )
        )
    return results


def fit_softmax_probe(
    features: np.ndarray,
    class_ids: np.ndarray,
    n_classes: int,
    epochs: int = 400,
    lr: float = 0.05,
):
    """Multinomial logistic regression via full-batch Adam from zero init."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(class_ids, dtype=np.int64)
    n = x.shape[0]
    net = Mlp(MlpSpec((x.shape[1], n_classes), "relu", "none"), rng=None)  # zero init, convex fit
    adam = AdamState(lr=lr)
    params = net.params()
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0
    for _ in range(epochs):
        logits, cache = mlp_forward(net, x)
        shifted = logits - logits.max(axis=1, keepdims=True)
        expv = np.exp(shifted)
        softmax = expv / expv.sum(axis=1, keepdims=True)
        mlp_backward(cache, (softmax - onehot) / n)
        adam_step(adam, params)
    return lambda xq: mlp_forward(net, np.asarray(xq, dtype=np.float64))[0].argmax(axis=1)


def instrument_leakage_probe(
    features: np.ndarray,
    instrument_ids: np.ndarray,
    *,
    representation: str = "",
    seed: int = 0,
    n_runs: int = DEFAULT_N_RUNS,
    train_fraction: float = 0.7,
    epochs: int = 400,
    lr: float = 0.05,
) -> LeakageResult:
    """Test accuracy of a linear probe classifying the instrument id.

    Each run redraws the train/test split; accuracy is averaged over runs.
    """
    features = np.asarray(features, dtype=np.float64)
    instrument_ids = np.asarray(instrument_ids, dtype=np.int64)
    classes = np.unique(instrument_ids)
    if len(classes) < 2:
        raise DataError("leakage probe needs at least two instrument classes")
    remap = {c: i for i, c in enumerate(classes.tolist())}
    y = np.array([remap[c] for c in instrument_ids.tolist()], dtype=np.int64)
    n = len(y)
    accs = []
    for run in range(n_runs):
        rng = stream(seed, "leakage", representation, run)
        perm = rng.permutation(n)
        n_train = int(round(train_fraction * n))
        if n_train < 1 or n_train >= n:
            raise DataError("train_fraction leaves an empty split")
        tr, te = perm[:n_train], perm[n_train:]
        if len(np.unique(y[tr])) < 2:
            raise DataError("leakage probe training split is single-class")
        transform = _standardizer(features[tr])
        predict = fit_softmax_probe(
            transform(features[tr]), y[tr], len(classes), epochs=epochs, lr=lr
        )
        accs.append(float(np.mean(predict(transform(features[te])) == y[te])))
    return LeakageResult(
        representation=representation,
        accuracies=tuple(accs),
        mean_accuracy=float(np.mean(accs)),
        std_accuracy=float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0,
    )


def pca_2d(features: np.ndarray):
    """Top-2 principal components via covariance eigendecomposition.

    Sign convention: each component's largest-magnitude loading is made
    positive, so output is deterministic. Returns (coords (n, 2),
    explained_variance (2,)).
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise DataError("pca_2d needs a 2D array with at least 3 rows")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]
    if eigvals[0] <= 1e-15:
        raise DataError("pca_2d input has zero variance (rank 0)")
    comps = eigvecs[:, :2].copy()
    for j in range(comps.shape[1]):
        pivot = np.argmax(np.abs(comps[:, j]))
        if comps[pivot, j] < 0:
            comps[:, j] = -comps[:, j]
    coords = centered @ comps
    explained = np.maximum(eigvals[:2], 0.0)
    if comps.shape[1] < 2:  # single-feature input: pad a zero second component
        coords = np.hstack([coords, np.zeros((x.shape[0], 1))])
        explained = np.array([explained[0], 0.0])
    return coords, explained


# ---------------------------------------------------------------------------
# report files


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_probe_csv(probe_results, path) -> None:
    lines = ["representation,train_size,r2_mean,r2_std,n_runs"]
    for r in probe_results:
        lines.append(
            f"{r.representation},{r.train_size},{_fmt(r.r2_mean)},{_fmt(r.r2_std)},{r.n_runs}"
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_probe_csv(path) -> list:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if lines[0] != "representation,train_size,r2_mean,r2_std,n_runs":
        raise DataError(f"{path}: unexpected probe CSV header")
    out = []
    for ln in lines[1:]:
        rep, size, mean, std, runs = ln.split(",")
        out.append(ProbeResult(rep, int(size), float(mean), float(std), int(runs)))
    return out


def write_coords_csv(table: EmbeddingTable, coords: np.ndarray, path) -> None:
    lines = ["obs_id,star_id,instrument_id,pc1,pc2"]
    for i in range(table.n_rows):
        lines.append(
            f"{table.obs_ids[i]},{table.star_ids[i]},{table.instrument_ids[i]},"
            f"{_fmt(float(coords[i, 0]))},{_fmt(float(coords[i, 1]))}"
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# minimal deterministic SVG output: no plotting dependency, identical bytes
# for identical inputs

_SVG_W, _SVG_H, _SVG_PAD = 640, 420, 56
_SERIES_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _svg_header(title: str) -> list:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" height="{_SVG_H}" '
        f'viewBox="0 0 {_SVG_W} {_SVG_H}">',
        f'<rect width="{_SVG_W}" height="{_SVG_H}" fill="white"/>',
        f'<text x="{_SVG_W / 2:.1f}" y="20" text-anchor="middle" font-size="14" '
        f'font-family="sans-serif">{title}</text>',
    ]


def _scale(values, lo, hi, out_lo, out_hi):
    span = hi - lo if hi > lo else 1.0
    return [(out_lo + (v - lo) / span * (out_hi - out_lo)) for v in values]


def write_probe_svg(probe_results, path, title="Probe R2 vs training-set size") -> None:
    by_rep = {}
    for r in probe_results:
        by_rep.setdefault(r.representation, []).append(r)
    xs_all = sorted({r.train_size for r in probe_results})
    ys_all = [r.r2_mean for r in probe_results]
    y_lo, y_hi = min(min(ys_all), 0.0), max(max(ys_all), 1.0)
    lx = [np.log10(x) for x in xs_all]
    parts = _svg_header(title)
    x_px = _scale(lx, min(lx), max(lx), _SVG_PAD, _SVG_W - _SVG_PAD)
    for x, xv in zip(x_px, xs_all):
        parts.append(
            f'<line x1="{x:.1f}" y1="{_SVG_PAD}" x2="{x:.1f}" y2="{_SVG_H - _SVG_PAD}" '
            f'stroke="#dddddd"/>'
        )
        parts.append(
            f'<text x="{x:.1f}" y="{_SVG_H - _SVG_PAD + 16}" text-anchor="middle" '
            f'font-size="11" font-family="sans-serif">{xv}</text>'
        )
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        yv = y_lo + frac * (y_hi - y_lo)
        y = _SVG_H - _SVG_PAD - frac * (_SVG_H - 2 * _SVG_PAD)
        parts.append(
            f'<line x1="{_SVG_PAD}" y1="{y:.1f}" x2="{_SVG_W - _SVG_PAD}" y2="{y:.1f}" '
            f'stroke="#dddddd"/>'
        )
        parts.append(
            f'<text x="{_SVG_PAD - 6}" y="{y + 4:.1f}" text-anchor="end" font-size="11" '
            f'font-family="sans-serif">{yv:.2f}</text>'
        )
    for si, (rep, rows) in enumerate(sorted(by_rep.items())):
        rows = sorted(rows, key=lambda r: r.train_size)
        color = _SERIES_COLORS[si % len(_SERIES_COLORS)]
        pts = []
        for r in rows:
            x = _scale([np.log10(r.train_size)], min(lx), max(lx), _SVG_PAD, _SVG_W - _SVG_PAD)[0]
            frac = (r.r2_mean - y_lo) / (y_hi - y_lo if y_hi > y_lo else 1.0)
            y = _SVG_H - _SVG_PAD - frac * (_SVG_H - 2 * _SVG_PAD)
            e_frac = r.r2_std / (y_hi - y_lo if y_hi > y_lo else 1.0)
            e_px = e_frac * (_SVG_H - 2 * _SVG_PAD)
            parts.append(
                f'<line x1="{x:.1f}" y1="{y - e_px:.1f}" x2="{x:.1f}" y2="{y + e_px:.1f}" '
                f'stroke="{color}" stroke-width="1"/>'
            )
            parts.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="3" fill="{color}"/>')
            pts.append(f"{x:.1f},{y:.1f}")
        parts.append(
            f'<polyline points="{" ".join(pts)}" fill="none" stroke="{color}" stroke-width="1.5"/>'
        )
        ly = _SVG_PAD + 14 * si
        parts.append(
            f'<line x1="{_SVG_W - 170}" y1="{ly}" x2="{_SVG_W - 150}" y2="{ly}" '
            f'stroke="{color}" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{_SVG_W - 144}" y="{ly + 4}" font-size="11" '
            f'font-family="sans-serif">{rep}</text>'
        )
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


def _categorical_color(i: int, n: int) -> str:
    hue = int(360 * i / max(n, 1))
    return f"hsl({hue},70%,45%)"


def _diverging_color(value: float, lo: float, hi: float) -> str:
    frac = 0.0 if hi <= lo else (value - lo) / (hi - lo)
    r = int(40 + 200 * frac)
    b = int(240 - 200 * frac)
    return f"rgb({r},60,{b})"


def write_scatter_svg(coords, colors, path, title) -> None:
    xs, ys = coords[:, 0], coords[:, 1]
    x_px = _scale(xs, xs.min(), xs.max(), _SVG_PAD, _SVG_W - _SVG_PAD)
    y_px = _scale(ys, ys.min(), ys.max(), _SVG_H - _SVG_PAD, _SVG_PAD)
    parts = _svg_header(title)
    for x, y, c in zip(x_px, y_px, colors):
        parts.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="2" fill="{c}" fill-opacity="0.7"/>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


def report(
    probe_results,
    leakage_results,
    pca_by_space: dict,
    table: EmbeddingTable,
    out_dir,
    theta0_by_obs: np.ndarray | None = None,
    write_svg: bool = True,
) -> dict:
    """Write the report bundle: probe CSV, per-space coordinate CSVs, summary JSON, SVGs.

    Returns the summary dict. pca_by_space maps space name to
    (coords, explained_variance).
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = {"probe_csv": os.path.join(out_dir, "probe_results.csv")}
    write_probe_csv(probe_results, paths["probe_csv"])
    for space, (coords, _explained) in sorted(pca_by_space.items()):
        p = os.path.join(out_dir, f"coords_{space}.csv")
        write_coords_csv(table, coords, p)
        paths[f"coords_{space}"] = p
    summary = {
        "probe": [
            {
                "representation": r.representation,
                "train_size": r.train_size,
                "r2_mean": r.r2_mean,
                "r2_std": r.r2_std,
                "n_runs": r.n_runs,
            }
            for r in probe_results
        ],
        "leakage": [
            {
                "representation": l.representation,
                "mean_accuracy": l.mean_accuracy,
                "std_accuracy": l.std_accuracy,
                "accuracies": list(l.accuracies),
            }
            for l in leakage_results
        ],
        "pca_explained_variance": {
            space: [float(v) for v in explained]
            for space, (_coords, explained) in sorted(pca_by_space.items())
        },
    }
    summary_path = os.path.join(out_dir, "summary.json")
    with open(summary_path, "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    paths["summary"] = summary_path

    if write_svg:
        if probe_results:
            write_probe_svg(probe_results, os.path.join(out_dir, "probe_r2.svg"))
        n_inst = len(np.unique(table.instrument_ids))
        inst_index = {c: i for i, c in enumerate(np.unique(table.instrument_ids).tolist())}
        for space, (coords, _explained) in sorted(pca_by_space.items()):
            colors = [_categorical_color(inst_index[i], n_inst) for i in table.instrument_ids.tolist()]
            write_scatter_svg(
                coords, colors, os.path.join(out_dir, f"pca_{space}_by_instrument.svg"),
                f"{space}: 2D projection, colored by instrument",
            )
            if theta0_by_obs is not None:
                lo, hi = float(theta0_by_obs.min()), float(theta0_by_obs.max())
                colors = [_diverging_color(v, lo, hi) for v in theta0_by_obs.tolist()]
                write_scatter_svg(
                    coords, colors, os.path.join(out_dir, f"pca_{space}_by_theta0.svg"),
                    f"{space}: 2D projection, colored by primary stellar parameter",
                )
    return summary
