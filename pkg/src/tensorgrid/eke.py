"""Feature engineering for the eddy-kinetic-energy workflow, plus a demo
application that drives the full orchestrator pipeline.

The four input features, in fixed order, are surface mean kinetic energy,
grid-normalized Rossby radius, surface relative vorticity, and
column-averaged isopycnal slope. Kinetic energy and slope are
log-transformed; vorticity goes through the signed-log transform with
offset C (values below the cutoff epsilon are snapped to zero first); the
Rossby radius is standardized as-is. The regression target is the natural
log of EKE, standardized with its own stored mean/std.

The demo stores the preprocessing pipeline as a script and a small
stand-in network (4 inputs, 1 output) as a model, pushes a synthetic
feature grid through put -> run_script -> run_model -> get, and decodes
the result back to a strictly positive EKE field.
"""

from __future__ import annotations

import argparse
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import client as client_mod
from .engine import (
    Dense,
    ModelSpec,
    ScriptSpec,
    Step,
    Tanh,
    dump_model,
    dump_script,
    load_model,
    op_fp,
    op_fp_inv,
    parse_script,
    run_model_exec,
    run_script_exec,
)
from .errors import DegenerateFeature, DegenerateRange, DomainError
from .launcher import launch_orchestrator

DEFAULT_C = 36.0
DEFAULT_EPSILON = 1e-15

FEATURE_NAMES = ("mke", "rossby_norm", "rel_vorticity", "isopycnal_slope")

MODEL_NAME = "eke-model"
SCRIPT_NAME = "eke-preprocess"

# demo-only target statistics for standardized ln(EKE); a trained setup
# would store the measured values here
DEMO_TARGET_MEAN = -9.0
DEMO_TARGET_STD = 1.2


@dataclass(frozen=True)
class FeatureVector:
    mke: float
    rossby_norm: float
    rel_vorticity: float
    isopycnal_slope: float


@dataclass(frozen=True)
class PreprocessParams:
    feature_means: tuple[float, float, float, float]
    feature_stds: tuple[float, float, float, float]
    target_mean: float
    target_std: float
    c: float = DEFAULT_C
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if not self.c > math.log(self.epsilon):
            raise DomainError(f"offset C={self.c} must exceed ln(epsilon)={math.log(self.epsilon)}")
        if any(s <= 0 for s in self.feature_stds) or self.target_std <= 0:
            raise DegenerateFeature("stds must be positive")

    def to_json(self) -> str:
        return json.dumps(
            {
                "c": self.c,
                "epsilon": self.epsilon,
                "features": {
                    name: {"mean": m, "std": s}
                    for name, m, s in zip(FEATURE_NAMES, self.feature_means, self.feature_stds)
                },
                "ln_eke": {"mean": self.target_mean, "std": self.target_std},
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "PreprocessParams":
        doc = json.loads(text)
        means = tuple(float(doc["features"][n]["mean"]) for n in FEATURE_NAMES)
        stds = tuple(float(doc["features"][n]["std"]) for n in FEATURE_NAMES)
        return cls(
            feature_means=means,
            feature_stds=stds,
            target_mean=float(doc["ln_eke"]["mean"]),
            target_std=float(doc["ln_eke"]["std"]),
            c=float(doc.get("c", DEFAULT_C)),
            epsilon=float(doc.get("epsilon", DEFAULT_EPSILON)),
        )


@dataclass(frozen=True)
class SampleWeights:
    weights: np.ndarray  # positive, sums to 1
    epoch_fraction: float = 0.1

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if np.any(w <= 0):
            raise DegenerateFeature("weights must be positive")
        if not 0 < self.epoch_fraction <= 1:
            raise DegenerateFeature("epoch fraction must be in (0, 1]")
        object.__setattr__(self, "weights", w / w.sum())


# --- scalar transforms -----------------------------------------------------------


def fp(x: float, c: float = DEFAULT_C) -> float:
    """Signed log with offset: -ln|x|-c for x<0, 0 at x=0, ln(x)+c for x>0."""
    return float(op_fp(np.float64(x), c))


def fp_inv(y: float, c: float = DEFAULT_C, epsilon: float = DEFAULT_EPSILON) -> float:
    """Inverse of fp over its image for |x| >= epsilon; raises DomainError
    for nonzero y inside the (0, c + ln(epsilon)) band around zero."""
    return float(op_fp_inv(np.float64(y), c, epsilon))


def fit_standardizer(samples) -> tuple[float, float]:
    """Population mean/std of the samples; zero spread is an error."""
    arr = np.asarray(samples, dtype=np.float64)
    if arr.size < 2:
        raise DegenerateFeature(f"need at least 2 samples, got {arr.size}")
    mean = float(arr.mean())
    std = float(arr.std(ddof=0))
    if std == 0.0:
        raise DegenerateFeature("samples have zero spread")
    return mean, std


def deadzone(x: np.ndarray, epsilon: float) -> np.ndarray:
    """Snap |x| < epsilon to exactly zero (the cutoff below which the
    signed-log transform treats a value as zero)."""
    out = np.array(x, copy=True)
    out[np.abs(out) < epsilon] = 0.0
    return out


def preprocess(fv: FeatureVector, p: PreprocessParams) -> np.ndarray:
    """Transform one feature vector into the standardized float32 model input.

    Order is fixed: [mke, rossby, vorticity, slope].
    """
    if not fv.mke > 0:
        raise DomainError(f"mke must be positive for the log transform, got {fv.mke}")
    if not fv.isopycnal_slope > 0:
        raise DomainError(f"isopycnal slope must be positive, got {fv.isopycnal_slope}")
    vort = 0.0 if abs(fv.rel_vorticity) < p.epsilon else fv.rel_vorticity
    transformed = (
        math.log(fv.mke),
        fv.rossby_norm,
        fp(vort, p.c),
        math.log(fv.isopycnal_slope),
    )
    out = [
        (t - m) / s for t, m, s in zip(transformed, p.feature_means, p.feature_stds)
    ]
    return np.asarray(out, dtype=np.float32)


def eke_decode(y_std: float, p: PreprocessParams) -> float:
    """De-standardize a predicted ln(EKE) and exponentiate; always positive."""
    return math.exp(y_std * p.target_std + p.target_mean)


# --- sampling ---------------------------------------------------------------------


def inverse_density_weights(values, n_bins: int = 64) -> SampleWeights:
    """Weights inversely proportional to a histogram density estimate.

    Every sample in a bin of k samples gets weight proportional to 1/k, so
    each occupied bin carries equal total probability: drawing by these
    weights flattens the sampled distribution.
    """
    arr = np.asarray(values, dtype=np.float64)
    if n_bins < 2:
        raise ValueError(f"n_bins must be >= 2, got {n_bins}")
    if arr.size < n_bins:
        raise ValueError(f"need at least n_bins={n_bins} samples, got {arr.size}")
    lo, hi = float(arr.min()), float(arr.max())
    if lo == hi:
        raise DegenerateRange("all values identical; histogram range is empty")
    width = (hi - lo) / n_bins
    idx = np.minimum(((arr - lo) / width).astype(np.int64), n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    weights = 1.0 / counts[idx]
    return SampleWeights(weights / weights.sum())


def weighted_epoch_sample(
    n: int, w: SampleWeights, fraction: float | None = None, seed: int = 0
) -> np.ndarray:
    """Draw floor(fraction*n) indices with replacement, probability
    proportional to the weights; deterministic for a given seed."""
    if w.weights.size != n:
        raise ValueError(f"weights cover {w.weights.size} samples, asked about {n}")
    frac = w.epoch_fraction if fraction is None else fraction
    k = int(frac * n)
    if k < 1:
        raise ValueError(f"fraction {frac} of {n} samples rounds below 1")
    rng = np.random.default_rng(seed)
    return rng.choice(n, size=k, replace=True, p=w.weights)


# --- pipeline artifacts ----------------------------------------------------------


def build_preprocess_script(p: PreprocessParams) -> bytes:
    """Stored-script form of preprocess(): arity 4, stacked trailing axis.

    The cutoff snap happens before tensors are stored (deadzone()), so the
    script itself is the pure transform chain.
    """
    steps = (
        Step(0, "ln"),
        Step(0, "standardize", {"mean": p.feature_means[0], "std": p.feature_stds[0]}),
        Step(1, "standardize", {"mean": p.feature_means[1], "std": p.feature_stds[1]}),
        Step(2, "fp", {"c": p.c}),
        Step(2, "standardize", {"mean": p.feature_means[2], "std": p.feature_stds[2]}),
        Step(3, "ln"),
        Step(3, "standardize", {"mean": p.feature_means[3], "std": p.feature_stds[3]}),
    )
    return dump_script(ScriptSpec(SCRIPT_NAME, 4, steps, "stack"))


def stub_eke_model(seed: int = 0, hidden: int = 8) -> bytes:
    """Stand-in network with the real pipeline's arity: 4 features in, one
    standardized ln(EKE) out."""
    rng = np.random.default_rng(seed)
    layers = (
        Dense(4, hidden, rng.normal(0, 0.5, (hidden, 4)).astype(np.float32),
              rng.normal(0, 0.1, hidden).astype(np.float32)),
        Tanh(),
        Dense(hidden, 1, rng.normal(0, 0.5, (1, hidden)).astype(np.float32),
              rng.normal(0, 0.1, 1).astype(np.float32)),
    )
    return dump_model(ModelSpec(MODEL_NAME, layers))


def synthetic_feature_grid(nx: int, ny: int, seed: int = 0) -> list[list[FeatureVector]]:
    """Deterministic synthetic grid with realistic value ranges, including
    vorticities below the cutoff and exact zeros."""
    rng = np.random.default_rng(seed)
    mke = rng.lognormal(-4.0, 1.5, (nx, ny))
    rossby = rng.normal(0.5, 0.2, (nx, ny))
    sign = rng.choice([-1.0, 1.0], (nx, ny))
    vort = sign * 10.0 ** rng.uniform(-16.0, -3.0, (nx, ny))
    vort[rng.random((nx, ny)) < 0.01] = 0.0
    slope = rng.lognormal(-7.0, 1.0, (nx, ny))
    return [
        [FeatureVector(mke[i, j], rossby[i, j], vort[i, j], slope[i, j]) for j in range(ny)]
        for i in range(nx)
    ]


def feature_arrays(grid: list[list[FeatureVector]]) -> tuple[np.ndarray, ...]:
    """Flatten a grid into the four per-feature f64 arrays."""
    flat = [fv for row in grid for fv in row]
    return (
        np.array([fv.mke for fv in flat], dtype=np.float64),
        np.array([fv.rossby_norm for fv in flat], dtype=np.float64),
        np.array([fv.rel_vorticity for fv in flat], dtype=np.float64),
        np.array([fv.isopycnal_slope for fv in flat], dtype=np.float64),
    )


def fit_params(
    grid: list[list[FeatureVector]],
    c: float = DEFAULT_C,
    epsilon: float = DEFAULT_EPSILON,
    target_mean: float = DEMO_TARGET_MEAN,
    target_std: float = DEMO_TARGET_STD,
) -> PreprocessParams:
    """Fit per-feature standardizers on the transformed features of a grid."""
    mke, rossby, vort, slope = feature_arrays(grid)
    if np.any(mke <= 0) or np.any(slope <= 0):
        raise DomainError("mke and isopycnal slope must be positive")
    transformed = (
        np.log(mke),
        rossby,
        op_fp(deadzone(vort, epsilon), c),
        np.log(slope),
    )
    stats = [fit_standardizer(t) for t in transformed]
    return PreprocessParams(
        feature_means=tuple(m for m, _ in stats),
        feature_stds=tuple(s for _, s in stats),
        target_mean=target_mean,
        target_std=target_std,
        c=c,
        epsilon=epsilon,
    )


def _model_inputs(grid, p: PreprocessParams) -> list[np.ndarray]:
    """The four float32 input tensors as stored by the demo: raw features
    with the vorticity cutoff applied."""
    mke, rossby, vort, slope = feature_arrays(grid)
    if np.any(mke <= 0) or np.any(slope <= 0):
        raise DomainError("mke and isopycnal slope must be positive")
    vort = deadzone(vort, p.epsilon)
    return [a.astype(np.float32) for a in (mke, rossby, vort, slope)]


def demo_inference(
    handle: client_mod.Client,
    grid: list[list[FeatureVector]],
    p: PreprocessParams,
    model_name: str = MODEL_NAME,
    script_name: str = SCRIPT_NAME,
) -> np.ndarray:
    """Push a feature grid through the stored preprocessing script and
    model, then decode to an EKE field (same shape as the grid)."""
    nx, ny = len(grid), len(grid[0])
    inputs = _model_inputs(grid, p)
    keys = [f"in.{name}" for name in FEATURE_NAMES]
    for key, arr in zip(keys, inputs):
        handle.put_tensor(key, arr)
    handle.run_script(script_name, keys, "pre.features")
    handle.run_model(model_name, ["pre.features"], ["out.lneke"])
    y = handle.get_tensor("out.lneke").to_numpy()
    eke = np.exp(y[:, 0].astype(np.float64) * p.target_std + p.target_mean)
    return eke.reshape(nx, ny)


def local_pipeline(
    grid: list[list[FeatureVector]],
    p: PreprocessParams,
    model_blob: bytes | None = None,
    script_blob: bytes | None = None,
    model_seed: int = 0,
) -> np.ndarray:
    """Composition of the same stored artifacts without an orchestrator;
    the reference the served pipeline is checked against."""
    nx, ny = len(grid), len(grid[0])
    script = parse_script(script_blob if script_blob is not None else build_preprocess_script(p))
    model = load_model(model_blob if model_blob is not None else stub_eke_model(model_seed))
    inputs = _model_inputs(grid, p)
    features = run_script_exec(script, inputs)
    y = run_model_exec(model, features)
    eke = np.exp(y[:, 0].astype(np.float64) * p.target_std + p.target_mean)
    return eke.reshape(nx, ny)


# --- CLI ---------------------------------------------------------------------------


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="eke-demo",
        description="End-to-end demo: synthetic feature grid through a local cluster.",
    )
    parser.add_argument("--grid", default="64,64", help="NX,NY grid size")
    parser.add_argument("--shards", type=int, default=2)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="eke-out", help="output directory")
    parser.add_argument("--base-port", type=int, default=None)
    args = parser.parse_args(argv)

    nx, ny = (int(tok) for tok in args.grid.split(","))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    grid = synthetic_feature_grid(nx, ny, args.seed)
    params = fit_params(grid)
    (out_dir / "preprocess_params.json").write_text(params.to_json() + "\n", encoding="utf-8")

    model_blob = stub_eke_model(args.seed)
    script_blob = build_preprocess_script(params)

    with launch_orchestrator(args.shards, base_port=args.base_port, run_dir=out_dir / "cluster") as orch:
        with client_mod.connect(orch.seed_address) as handle:
            handle.set_model(MODEL_NAME, model_blob, batch_size=10_000)
            handle.set_script(SCRIPT_NAME, script_blob)
            field = demo_inference(handle, grid, params)

    reference = local_pipeline(grid, params, model_blob=model_blob, script_blob=script_blob)
    max_rel_diff = float(np.max(np.abs(field - reference) / reference))

    np.savetxt(out_dir / "eke_field.csv", field, delimiter=",")
    summary = {
        "grid": [nx, ny],
        "shards": args.shards,
        "seed": args.seed,
        "eke_min": float(field.min()),
        "eke_max": float(field.max()),
        "all_positive": bool(np.all(field > 0)),
        "oracle_max_rel_diff": max_rel_diff,
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(summary, indent=2))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
