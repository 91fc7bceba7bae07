"""Synthetic demand panels: generation, censoring, transfer, splits, and I/O.

A DemandPanel is an N_t × N_p grid of cells holding observed demand, supply
and censoring flags, optionally the true (noisy) and noiseless demand when
data is simulated, and a train/test mask.  Panels round-trip losslessly
through a versioned JSON document; plain CSV import is available for
externally obtained data.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .diffusion import DiffusionConfig, ProductGraph, diffused_demand
from .kernels import (
    ProductKernelSpec,
    TemporalKernelSpec,
    build_joint_model,
    build_statespace,
    eval_product_kernel,
)

__all__ = [
    "DemandPanel",
    "CensorPolicy",
    "PanelFormatError",
    "gen_sinusoid_panel",
    "sample_gp_panel",
    "apply_censoring",
    "apply_demand_transfer",
    "split",
    "save_panel",
    "load_panel",
    "load_panel_csv",
]

SCHEMA_VERSION = 1


class PanelFormatError(ValueError):
    """A panel file is malformed or violates the panel invariants."""


@dataclass(frozen=True)
class DemandPanel:
    """Joint demand data for N_p products over N_t time points.

    Invariants: times strictly increasing; Y_obs ≤ U elementwise and
    C = (Y_obs ≥ U) wherever U is finite.
    """

    times: np.ndarray  # (N_t,)
    features: np.ndarray  # (N_p, D_p)
    Y_obs: np.ndarray  # (N_t, N_p)
    U: np.ndarray  # (N_t, N_p), +inf where unconstrained
    C: np.ndarray  # (N_t, N_p) bool
    F_true: np.ndarray | None = None
    F_noiseless: np.ndarray | None = None
    train_mask: np.ndarray | None = None  # (N_t, N_p) bool
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    @property
    def n_times(self) -> int:
        return self.times.shape[0]

    @property
    def n_products(self) -> int:
        return self.features.shape[0]

    def validate(self):
        nt, np_ = self.times.shape[0], self.features.shape[0]
        if self.times.ndim != 1 or np.any(np.diff(self.times) <= 0):
            raise PanelFormatError("times must be strictly increasing")
        for name in ("Y_obs", "U", "C"):
            arr = getattr(self, name)
            if arr.shape != (nt, np_):
                raise PanelFormatError(f"{name} must have shape ({nt}, {np_}), got {arr.shape}")
        for name in ("F_true", "F_noiseless", "train_mask"):
            arr = getattr(self, name)
            if arr is not None and arr.shape != (nt, np_):
                raise PanelFormatError(f"{name} must have shape ({nt}, {np_}), got {arr.shape}")
        if np.any(self.Y_obs > self.U):
            raise PanelFormatError("observed demand exceeds supply somewhere")
        finite = np.isfinite(self.U)
        if np.any(self.C[finite] != (self.Y_obs[finite] >= self.U[finite])):
            raise PanelFormatError("censoring flags inconsistent with Y_obs >= U")
        if np.any(self.C[~finite]):
            raise PanelFormatError("cells with unbounded supply cannot be censored")

    def test_mask(self) -> np.ndarray:
        if self.train_mask is None:
            raise ValueError("panel has no split mask")
        return ~self.train_mask

    def uncensored_view(self) -> "DemandPanel":
        """Panel whose observations are the true demand (no censoring).

        Used to fit reference models against the ground truth; requires
        F_true.
        """
        if self.F_true is None:
            raise ValueError("no true demand available")
        shape = self.Y_obs.shape
        return replace(
            self,
            Y_obs=self.F_true.copy(),
            U=np.full(shape, np.inf),
            C=np.zeros(shape, dtype=bool),
        )

    def to_dict(self) -> dict:
        def col(a):
            return np.asarray(a).tolist()

        d = {
            "schema_version": SCHEMA_VERSION,
            "times": col(self.times),
            "features": col(self.features),
            "y_obs": col(self.Y_obs),
            "u": [[None if not np.isfinite(v) else v for v in row] for row in self.U],
            "c": col(self.C.astype(int)),
            "meta": self.meta,
        }
        if self.F_true is not None:
            d["f_true"] = col(self.F_true)
        if self.F_noiseless is not None:
            d["f_noiseless"] = col(self.F_noiseless)
        if self.train_mask is not None:
            d["train_mask"] = col(self.train_mask.astype(int))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DemandPanel":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise PanelFormatError(
                f"unsupported panel schema version {d.get('schema_version')!r}"
            )
        try:
            U = np.array(
                [[np.inf if v is None else float(v) for v in row] for row in d["u"]]
            )
            return cls(
                times=np.asarray(d["times"], dtype=float),
                features=np.atleast_2d(np.asarray(d["features"], dtype=float)),
                Y_obs=np.asarray(d["y_obs"], dtype=float),
                U=U,
                C=np.asarray(d["c"]).astype(bool),
                F_true=None if "f_true" not in d else np.asarray(d["f_true"], dtype=float),
                F_noiseless=(
                    None if "f_noiseless" not in d else np.asarray(d["f_noiseless"], dtype=float)
                ),
                train_mask=(
                    None if "train_mask" not in d else np.asarray(d["train_mask"]).astype(bool)
                ),
                meta=d.get("meta", {}),
            )
        except KeyError as exc:
            raise PanelFormatError(f"panel document missing field {exc}") from exc

    def content_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()


@dataclass(frozen=True)
class CensorPolicy:
    """How supply limits are imposed on a panel of true demand.

    kind "constant": U = threshold everywhere (scalar or one per product).
    kind "uniform": U ~ Uniform(lo, hi) i.i.d. per cell.
    kind "markov": a per-product 2-state supply chain; p_out is the
    probability of entering the out-of-supply state and p_in of leaving it.
    While out of supply the cap is either a constant (`cap_rule="constant"`)
    or drawn at entry as Uniform(0, cap_frac · f_t) and held until recovery
    (`cap_rule="uniform_entry"`).
    """

    kind: str
    threshold: float | tuple = 0.0
    lo: float = 0.0
    hi: float = 1.0
    p_out: float = 0.0
    p_in: float = 1.0
    cap_rule: str = "constant"
    cap_value: float | tuple = 0.0
    cap_frac: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("constant", "uniform", "markov"):
            raise ValueError(f"unknown censoring kind {self.kind!r}")
        if self.kind == "uniform" and not self.lo <= self.hi:
            raise ValueError("uniform censoring needs lo <= hi")
        if self.kind == "markov":
            for name in ("p_out", "p_in"):
                p = getattr(self, name)
                if not 0.0 <= p <= 1.0:
                    raise ValueError(f"{name} must be a probability, got {p}")
            if self.cap_rule not in ("constant", "uniform_entry"):
                raise ValueError(f"unknown cap rule {self.cap_rule!r}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "threshold": self.threshold,
            "lo": self.lo,
            "hi": self.hi,
            "p_out": self.p_out,
            "p_in": self.p_in,
            "cap_rule": self.cap_rule,
            "cap_value": self.cap_value,
            "cap_frac": self.cap_frac,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CensorPolicy":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        if isinstance(known.get("threshold"), list):
            known["threshold"] = tuple(known["threshold"])
        if isinstance(known.get("cap_value"), list):
            known["cap_value"] = tuple(known["cap_value"])
        return cls(**known)


def _fresh_panel(times, features, f_noiseless, f_true, meta) -> DemandPanel:
    shape = f_true.shape
    return DemandPanel(
        times=times,
        features=features,
        Y_obs=f_true.copy(),
        U=np.full(shape, np.inf),
        C=np.zeros(shape, dtype=bool),
        F_true=f_true,
        F_noiseless=f_noiseless,
        meta=meta,
    )


def gen_sinusoid_panel(
    thetas,
    n_times: int,
    t_max: float,
    noise_sd: float,
    seed: int,
    features=None,
) -> DemandPanel:
    """Independent sinusoidal series f(t) = cos(θ1 t + θ2 π + θ3)·sin(θ4 t + θ5)
    plus white observation noise; one parameter vector per product."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    if thetas.shape[1] != 5:
        raise ValueError("each series needs 5 sinusoid parameters")
    n_p = thetas.shape[0]
    times = np.linspace(0.0, t_max, n_times)
    t = times[:, None]
    th = thetas.T
    f = np.cos(th[0] * t + th[1] * np.pi + th[2]) * np.sin(th[3] * t + th[4])
    rng = np.random.default_rng(seed)
    f_true = f + noise_sd * rng.standard_normal(f.shape)
    if features is None:
        features = np.arange(n_p, dtype=float)[:, None]
    features = np.atleast_2d(np.asarray(features, dtype=float))
    meta = {"generator": "sinusoid", "seed": seed, "noise_sd": noise_sd}
    return _fresh_panel(times, features, f, f_true, meta)


def _psd_sqrt(M: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (M + M.T))
    vals = np.clip(vals, 0.0, None)
    return vecs * np.sqrt(vals)


def sample_gp_panel(
    temporal_spec: TemporalKernelSpec,
    product_spec: ProductKernelSpec,
    n_products: int,
    n_times: int,
    noise_sd: float,
    seed: int,
    feature_range=(-2.0, 2.0),
    feature_dim: int = 2,
    dt: float = 1.0,
) -> DemandPanel:
    """Draw a joint panel from the separable GP prior via its discrete
    state-space form; features are sampled uniformly in the given box."""
    rng = np.random.default_rng(seed)
    lo, hi = feature_range
    features = rng.uniform(lo, hi, size=(n_products, feature_dim))
    gram = eval_product_kernel(product_spec, features)
    kernel_t = build_statespace(temporal_spec)
    times = np.arange(n_times, dtype=float) * dt
    model = build_joint_model(kernel_t, gram, times)

    D = model.state_dim
    x = _psd_sqrt(model.Pinf_joint) @ rng.standard_normal(D)
    f = np.empty((n_times, n_products))
    f[0] = model.H_joint @ x
    if n_times > 1:
        sqrtQ = {k: _psd_sqrt(model.Q_unique[k]) for k in range(model.A_unique.shape[0])}
        for n in range(1, n_times):
            k = model.step_index[n]
            x = model.A_unique[k] @ x + sqrtQ[k] @ rng.standard_normal(D)
            f[n] = model.H_joint @ x
    f_true = f + noise_sd * rng.standard_normal(f.shape)
    meta = {
        "generator": "gp",
        "seed": seed,
        "noise_sd": noise_sd,
        "temporal": temporal_spec.to_dict(),
        "product": product_spec.to_dict(),
    }
    return _fresh_panel(times, features, f, f_true, meta)


def apply_censoring(panel: DemandPanel, policy: CensorPolicy) -> DemandPanel:
    """Impose supply limits on the true demand, setting U, C and the capped
    observations (before any demand transfer)."""
    if panel.F_true is None:
        raise ValueError("censoring requires the true demand")
    f = panel.F_true
    nt, n_p = f.shape

    if policy.kind == "constant":
        th = np.broadcast_to(np.asarray(policy.threshold, dtype=float), (n_p,))
        U = np.tile(th, (nt, 1))
    elif policy.kind == "uniform":
        rng = np.random.default_rng(policy.seed)
        U = rng.uniform(policy.lo, policy.hi, size=(nt, n_p))
    else:  # markov
        U = np.full((nt, n_p), np.inf)
        cap_const = np.broadcast_to(np.asarray(policy.cap_value, dtype=float), (n_p,))
        streams = [np.random.default_rng(s) for s in np.random.SeedSequence(policy.seed).spawn(n_p)]
        for k in range(n_p):
            rng = streams[k]
            out = False
            cap = np.inf
            for n in range(nt):
                if out:
                    if rng.uniform() < policy.p_in:
                        out = False
                else:
                    if rng.uniform() < policy.p_out:
                        out = True
                        if policy.cap_rule == "uniform_entry":
                            cap = rng.uniform(0.0, policy.cap_frac * max(f[n, k], 0.0))
                        else:
                            cap = cap_const[k]
                if out:
                    U[n, k] = cap

    y = np.minimum(f, U)
    C = np.isfinite(U) & (f >= U)
    meta = dict(panel.meta, censoring=policy.to_dict())
    return replace(panel, Y_obs=y, U=U, C=C, meta=meta)


def apply_demand_transfer(
    panel: DemandPanel, graph: ProductGraph, config: DiffusionConfig
) -> DemandPanel:
    """Move unsatisfied demand along the product graph and finalize Y_obs.

    Per time index, Y_obs = min(F_true + d, U) where d is the diffused
    demand; excess still above supply after the configured number of steps
    is discarded.  Censoring flags are recomputed against the final
    observations.
    """
    if panel.F_true is None:
        raise ValueError("demand transfer requires the true demand")
    f = panel.F_true
    U = panel.U
    y = np.empty_like(f)
    for n in range(panel.n_times):
        observed_pre = np.minimum(f[n], U[n])
        d = diffused_demand(f[n], U[n], graph, config, observed=observed_pre)
        y[n] = np.minimum(f[n] + d, U[n])
    C = np.isfinite(U) & (y >= U)
    meta = dict(panel.meta, transfer=config.to_dict())
    return replace(panel, Y_obs=y, C=C, meta=meta)


def split(panel: DemandPanel, strategy: str, **kw) -> DemandPanel:
    """Attach a train/test cell mask.

    "evenly_spaced" picks n_train whole time steps spread evenly over the
    grid (the remaining steps must cover n_test); "fraction" samples cells
    uniformly at random with the given seed.
    """
    nt, n_p = panel.Y_obs.shape
    if strategy == "evenly_spaced":
        n_train, n_test = int(kw["n_train"]), int(kw["n_test"])
        if n_train + n_test > nt:
            raise ValueError(f"n_train + n_test = {n_train + n_test} exceeds grid size {nt}")
        pos = (np.arange(n_train) * nt) // n_train
        mask = np.zeros((nt, n_p), dtype=bool)
        mask[pos, :] = True
    elif strategy == "fraction":
        frac = float(kw["train_frac"])
        if not 0.0 < frac <= 1.0:
            raise ValueError(f"train fraction must be in (0, 1], got {frac}")
        rng = np.random.default_rng(int(kw.get("seed", 0)))
        n_cells = nt * n_p
        n_train = int(round(frac * n_cells))
        chosen = rng.choice(n_cells, size=n_train, replace=False)
        mask = np.zeros(n_cells, dtype=bool)
        mask[chosen] = True
        mask = mask.reshape(nt, n_p)
    else:
        raise ValueError(f"unknown split strategy {strategy!r}")
    meta = dict(panel.meta, split={"strategy": strategy, **{k: kw[k] for k in kw}})
    return replace(panel, train_mask=mask, meta=meta)


def save_panel(panel: DemandPanel, path) -> None:
    with open(path, "w") as fh:
        json.dump(panel.to_dict(), fh, sort_keys=True)
        fh.write("\n")


def load_panel(path) -> DemandPanel:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise PanelFormatError(f"not a panel document: {exc}") from exc
    return DemandPanel.from_dict(doc)


def load_panel_csv(path, features) -> DemandPanel:
    """Import a long-format CSV with columns time, product_id, y, u.

    `features` is the N_p × D_p feature matrix (row k for product_id k);
    u may be empty or "inf" for unconstrained cells.  Real-data mode: the
    optional F columns are absent.
    """
    import csv

    features = np.atleast_2d(np.asarray(features, dtype=float))
    rows = []
    with open(path) as fh:
        for rec in csv.DictReader(fh):
            u = rec.get("u", "")
            rows.append(
                (
                    float(rec["time"]),
                    int(rec["product_id"]),
                    float(rec["y"]),
                    np.inf if u in ("", "inf", "Infinity") else float(u),
                )
            )
    if not rows:
        raise PanelFormatError("CSV contains no data rows")
    times = np.array(sorted({r[0] for r in rows}))
    n_p = features.shape[0]
    t_index = {t: i for i, t in enumerate(times)}
    Y = np.full((times.size, n_p), np.nan)
    U = np.full((times.size, n_p), np.inf)
    for t, k, y, u in rows:
        if not 0 <= k < n_p:
            raise PanelFormatError(f"product_id {k} outside feature table")
        Y[t_index[t], k] = y
        U[t_index[t], k] = u
    if np.any(np.isnan(Y)):
        raise PanelFormatError("CSV panel has missing cells")
    C = np.isfinite(U) & (Y >= U)
    return DemandPanel(
        times=times, features=features, Y_obs=Y, U=U, C=C, meta={"source": str(path)}
    )
