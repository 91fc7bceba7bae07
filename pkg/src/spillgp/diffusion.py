"""Product-similarity graph and the transfer process for unsatisfied demand.

Demand above supply leaves its product and moves along graph edges in
proportion to feature similarity.  A transition matrix T is the row
normalization of W, where W_{ij} = exp(−‖p_i − p_j‖²/ℓ²) off the diagonal
(no self loops).  An optional absorbing sink node with incoming weight π
models customers who give up; once mass enters the sink it never leaves.

One transfer step maps a demand vector f to

    f ← f + max(f − u, 0) (T − I),

so total mass is conserved whenever T is row stochastic.  The diffused
demand d = max(f^(n_steps) − f, 0) on the product nodes is the extra demand
each product receives because similar products ran out of supply.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "DiffusionConfig",
    "ProductGraph",
    "GraphError",
    "build_graph",
    "mask_graph",
    "diffuse_step",
    "diffused_demand",
    "export_transition_csv",
]


class GraphError(ValueError):
    """Graph construction or masking produced an unusable transition matrix."""


@dataclass(frozen=True)
class DiffusionConfig:
    """Transfer-process parameters.

    supply_aware=True replaces the multi-step process on the static graph by a
    single step on a per-time-index graph whose edges into out-of-supply
    products are removed (customers see all supply levels once).
    """

    ell_diff: float
    pi_sink: float = 0.0
    n_diff: int = 1
    supply_aware: bool = False

    def __post_init__(self):
        if not (self.ell_diff > 0 and np.isfinite(self.ell_diff)):
            raise ValueError(f"ell_diff must be positive, got {self.ell_diff}")
        if self.pi_sink < 0:
            raise ValueError(f"pi_sink must be nonnegative, got {self.pi_sink}")
        if self.n_diff < 1 or int(self.n_diff) != self.n_diff:
            raise ValueError(f"n_diff must be a positive integer, got {self.n_diff}")
        object.__setattr__(self, "n_diff", int(self.n_diff))
        if self.supply_aware and self.n_diff != 1:
            raise ValueError("supply_aware transfer uses exactly one step")

    def to_dict(self) -> dict:
        return {
            "ell_diff": self.ell_diff,
            "pi_sink": self.pi_sink,
            "n_diff": self.n_diff,
            "supply_aware": self.supply_aware,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionConfig":
        return cls(
            ell_diff=float(d["ell_diff"]),
            pi_sink=float(d.get("pi_sink", 0.0)),
            n_diff=int(d.get("n_diff", 1)),
            supply_aware=bool(d.get("supply_aware", False)),
        )


@dataclass(frozen=True)
class ProductGraph:
    """Weighted product graph with its row-stochastic transition matrix.

    When a sink is present it is the last node: W and T are
    (N_p+1) × (N_p+1) and the sink row is (0, …, 0, 1).
    """

    features: np.ndarray  # (N_p, D_p)
    W: np.ndarray
    T: np.ndarray
    has_sink: bool

    @property
    def n_products(self) -> int:
        return self.features.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.T.shape[0]


def _normalize_rows(W: np.ndarray, has_sink: bool) -> np.ndarray:
    sums = W.sum(axis=1)
    n_products = W.shape[0] - (1 if has_sink else 0)
    dead = sums[:n_products] <= 0.0
    if np.any(dead):
        if not has_sink:
            raise GraphError(
                f"rows {np.nonzero(dead)[0].tolist()} have no outgoing weight and "
                "there is no sink node to absorb their unsatisfied demand"
            )
        W = W.copy()
        W[:n_products][dead, -1] = 1.0
        sums = W.sum(axis=1)
    return W / sums[:, None]


def build_graph(features: np.ndarray, config: DiffusionConfig) -> ProductGraph:
    """Build the similarity graph over products described by feature rows."""
    features = np.atleast_2d(np.asarray(features, dtype=float))
    n_p = features.shape[0]
    if n_p < 2:
        raise GraphError("demand transfer needs at least two products")
    if not np.all(np.isfinite(features)):
        raise GraphError("product features must be finite")

    d2 = np.sum((features[:, None, :] - features[None, :, :]) ** 2, axis=-1)
    K = np.exp(-d2 / config.ell_diff**2)
    np.fill_diagonal(K, 0.0)

    if config.pi_sink > 0:
        W = np.zeros((n_p + 1, n_p + 1))
        W[:n_p, :n_p] = K
        W[:n_p, n_p] = config.pi_sink
        W[n_p, n_p] = 1.0
        has_sink = True
    else:
        W = K
        has_sink = False

    return ProductGraph(features=features, W=W, T=_normalize_rows(W, has_sink), has_sink=has_sink)


def mask_graph(graph: ProductGraph, supply_n: np.ndarray, observed_n: np.ndarray) -> ProductGraph:
    """Remove edges into products that are out of supply at one time index.

    A product j can receive demand only while observed_n[j] < supply_n[j].
    Rows are re-normalized over the remaining targets; a product with no
    in-supply alternative sends everything to the sink (error if there is
    none).  The sink row is unchanged.
    """
    supply_n = np.asarray(supply_n, dtype=float)
    observed_n = np.asarray(observed_n, dtype=float)
    n_p = graph.n_products
    if supply_n.shape != (n_p,) or observed_n.shape != (n_p,):
        raise ValueError("supply and observation vectors must have one entry per product")

    in_supply = observed_n < supply_n
    if np.all(in_supply):
        return graph
    W = graph.W.copy()
    W[:, :n_p][:, ~in_supply] = 0.0
    if graph.has_sink:
        W[n_p, n_p] = 1.0
    return ProductGraph(
        features=graph.features,
        W=W,
        T=_normalize_rows(W, graph.has_sink),
        has_sink=graph.has_sink,
    )


def diffuse_step(f: np.ndarray, u: np.ndarray, graph: ProductGraph) -> np.ndarray:
    """One transfer step on a demand vector over all graph nodes."""
    f = np.asarray(f, dtype=float)
    u = np.asarray(u, dtype=float)
    if f.shape != (graph.n_nodes,) or u.shape != (graph.n_nodes,):
        raise ValueError(
            f"expected vectors of length {graph.n_nodes} (including the sink), "
            f"got f {f.shape} and u {u.shape}"
        )
    excess = np.maximum(f - u, 0.0)
    return f + excess @ (graph.T - np.eye(graph.n_nodes))


def _pad_sink(f: np.ndarray, u: np.ndarray, graph: ProductGraph):
    # Sink starts empty and never runs out of supply.
    if not graph.has_sink:
        return f, u
    return np.concatenate([f, [0.0]]), np.concatenate([u, [np.inf]])


def diffused_demand(
    f: np.ndarray,
    u: np.ndarray,
    graph: ProductGraph,
    config: DiffusionConfig,
    observed: np.ndarray | None = None,
) -> np.ndarray:
    """Extra demand each product receives after n_diff transfer steps.

    f and u are length-N_p (product nodes only); the sink is handled
    internally.  In supply-aware mode the single step runs on the masked
    graph, which requires the observed demand vector.
    """
    f = np.asarray(f, dtype=float)
    u = np.asarray(u, dtype=float)
    n_p = graph.n_products
    if f.shape != (n_p,) or u.shape != (n_p,):
        raise ValueError(f"expected length-{n_p} product vectors")
    if config.supply_aware:
        if observed is None:
            raise ValueError("supply-aware transfer needs the observed demand for masking")
        graph = mask_graph(graph, u, np.asarray(observed, dtype=float))
    x, u_pad = _pad_sink(f, u, graph)
    for _ in range(config.n_diff):
        x = diffuse_step(x, u_pad, graph)
    return np.maximum(x[:n_p] - f, 0.0)


def _diffuse_batch(
    F: np.ndarray,
    U: np.ndarray,
    T: np.ndarray,
    n_products: int,
    n_steps: int,
    want_jac: bool,
):
    """Vectorized transfer over a batch of latent-demand rows.

    F: (B, N_p) latent demand; U: supply, (N_p,) or (B, N_p); T: transition
    matrix over all nodes (sink last when present).  Returns the diffused
    demand D (B, N_p) and, when requested, its Jacobian dD/dF (B, N_p, N_p)
    using the subgradient max′(x, 0) = 0 at x = 0.
    """
    B = F.shape[0]
    m = T.shape[0]
    has_sink = m == n_products + 1
    X = np.concatenate([F, np.zeros((B, 1))], axis=1) if has_sink else F.copy()
    U = np.broadcast_to(np.asarray(U, dtype=float), (B, n_products))
    U_pad = np.concatenate([U, np.full((B, 1), np.inf)], axis=1) if has_sink else U

    TmI = T - np.eye(m)
    if want_jac:
        J = np.zeros((B, m, n_products))
        J[:, :n_products, :] = np.eye(n_products)
    for _ in range(n_steps):
        active = (X > U_pad).astype(float)
        excess = np.maximum(X - U_pad, 0.0)
        if want_jac:
            # d(step)/dX = I + (T − I)ᵀ diag(active) per row, composed into J.
            J = J + np.einsum("kj,bk,bki->bji", TmI, active, J)
        X = X + excess @ TmI
    D = np.maximum(X[:, :n_products] - F, 0.0)
    if not want_jac:
        return D, None
    pos = (X[:, :n_products] - F) > 0
    dD = J[:, :n_products, :] - np.eye(n_products)
    dD = dD * pos[:, :, None]
    return D, dD


def export_transition_csv(graph: ProductGraph, path) -> None:
    """Write the transition matrix as CSV (rows = source node)."""
    labels = [f"p{i}" for i in range(graph.n_products)]
    if graph.has_sink:
        labels.append("sink")
    header = "," + ",".join(labels)
    lines = [header]
    for i, row in enumerate(graph.T):
        lines.append(labels[i] + "," + ",".join(f"{v:.12g}" for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
