"""Flow matching for fractional atom positions on the 3-torus.

Training pairs interpolate along the minimum-image geodesic from data
positions toward uniform noise; the network predicts per-atom fractional
velocities from pairwise minimum-image geometry, so its outputs are
invariant to lattice rotation and wrapped translation and equivariant to
atom permutation. Sampling runs Euler steps from uniform noise back to data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .atoms import Standardizer
from .autodiff import Tensor
from .core import Lattice, lattice_invariants, min_image_delta, wrap_frac

CHECKPOINT_VERSION = 1
TIME_FREQS = 4
TIME_DIM = 1 + 2 * TIME_FREQS
RBF_CENTERS = np.linspace(0.0, 8.0, 16)
RBF_WIDTH = RBF_CENTERS[1] - RBF_CENTERS[0]


@dataclass(frozen=True)
class FlowSample:
    """Interpolated positions, time, and target fractional velocities."""

    x_in: np.ndarray
    t: float
    v: np.ndarray


def make_training_pair(crystal, rng: np.random.Generator, torus: bool = True) -> FlowSample:
    """Draw noise positions and a time, returning the flow-matching triple.

    In torus mode the interpolation follows the per-component minimum-image
    geodesic, so wrap(X + 1 * V) lands exactly on the noise endpoint and every
    velocity component has magnitude <= 0.5. The Euclidean variant keeps the
    literal straight-line path for comparison.
    """
    x = crystal.frac_coords
    x_noise = rng.random(x.shape)
    t = float(rng.random())
    if torus:
        d = min_image_delta(x, x_noise)
        x_in = wrap_frac(x + t * d)
    else:
        d = x_noise - x
        x_in = (1.0 - t) * x + t * x_noise
    return FlowSample(x_in, t, d)


def _time_features(t: float) -> np.ndarray:
    ks = np.arange(1, TIME_FREQS + 1)
    return np.concatenate([[t], np.sin(2 * np.pi * ks * t), np.cos(2 * np.pi * ks * t)])


def _rbf(r: np.ndarray) -> np.ndarray:
    return np.exp(-((r[:, None] - RBF_CENTERS[None, :]) ** 2) / (2 * RBF_WIDTH**2))


class PositionFlowModel:
    """Equivariant velocity field over fractional coordinates."""

    def __init__(
        self,
        species: tuple[str, ...],
        hidden: int = 128,
        n_layers: int = 4,
        condition_props: list[str] | None = None,
        lat_standardizer: Standardizer | None = None,
        cond_standardizer: Standardizer | None = None,
        torus: bool = True,
        seed: int = 0,
    ):
        self.species = tuple(species)
        self.species_index = {s: i for i, s in enumerate(self.species)}
        self.hidden = hidden
        self.n_layers = n_layers
        self.torus = torus
        self.condition_props = list(condition_props or [])
        self.lat_standardizer = lat_standardizer or Standardizer(np.zeros(6), np.ones(6))
        ncond = len(self.condition_props)
        self.cond_standardizer = cond_standardizer or Standardizer(np.zeros(ncond), np.ones(ncond))
        rng = np.random.default_rng(seed)
        h = hidden
        rbf = len(RBF_CENTERS)
        in_dim = h + TIME_DIM + 6 + 2 * ncond

        def p(shape, scale=None):
            if scale is None:
                scale = 1.0 / np.sqrt(shape[0])
            return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)

        self.params: dict[str, Tensor] = {
            "embed": p((len(self.species), h), scale=0.5),
            "w_in": p((in_dim, h)),
            "b_in": Tensor(np.zeros(h), requires_grad=True),
            "w_edge_w1": p((2 * h + rbf + 3, h)),
            "b_edge_w1": Tensor(np.zeros(h), requires_grad=True),
            # small head init keeps the initial field near zero without
            # blocking gradient flow into the backbone
            "w_edge_w2": p((h, 3), scale=0.01),
            "b_edge_w2": Tensor(np.zeros(3), requires_grad=True),
            "w_node_v1": p((h, h)),
            "b_node_v1": Tensor(np.zeros(h), requires_grad=True),
            "w_node_v2": p((h, 3), scale=0.01),
            "b_node_v2": Tensor(np.zeros(3), requires_grad=True),
        }
        for layer in range(n_layers):
            self.params[f"w_emsg{layer}"] = p((2 * h + rbf + 3, h))
            self.params[f"b_emsg{layer}"] = Tensor(np.zeros(h), requires_grad=True)
            self.params[f"w_self{layer}"] = p((h, h))
            self.params[f"w_msg{layer}"] = p((h, h))
            self.params[f"b_node{layer}"] = Tensor(np.zeros(h), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def _condition_features(self, conditions) -> np.ndarray:
        conditions = conditions or {}
        unknown = set(conditions) - set(self.condition_props)
        if unknown:
            raise ValueError(f"condition properties {sorted(unknown)} not in model schema")
        if not self.condition_props:
            return np.zeros(0)
        raw = np.array([conditions.get(p, np.nan) for p in self.condition_props])
        flags = np.where(np.isnan(raw), 0.0, 1.0)
        std = self.cond_standardizer(np.where(np.isnan(raw), self.cond_standardizer.mean, raw))
        return np.concatenate([std * flags, flags])

    def velocity_graph(self, lattice: Lattice, species, x, t, conditions=None) -> Tensor:
        """Differentiable (N,3) fractional velocities at positions x, time t."""
        n = len(species)
        tokens = [self.species_index[s] for s in species]
        x = np.asarray(x, dtype=float)

        lat = self.lat_standardizer(lattice_invariants(lattice))
        extra = np.tile(
            np.concatenate([_time_features(t), lat, self._condition_features(conditions)]),
            (n, 1),
        )
        feats = ad.concat([ad.take_rows(self.params["embed"], tokens), Tensor(extra)], axis=1)
        h = ad.silu(ad.add(ad.matmul(feats, self.params["w_in"]), self.params["b_in"]))

        # fully connected directed edges (i != j), geometry held constant
        src, dst = np.nonzero(~np.eye(n, dtype=bool))
        d_frac = min_image_delta(x[src], x[dst])  # displacement i -> j
        dist = np.linalg.norm(d_frac @ lattice.rows, axis=1)
        # geometry features: distance basis plus the raw fractional deltas,
        # so the velocity head can act per lattice axis
        geom = Tensor(np.concatenate([_rbf(dist), d_frac], axis=1))
        n_edges = len(src)
        agg = np.zeros((n, n_edges))
        if n > 1:
            agg[src, np.arange(n_edges)] = 1.0 / (n - 1)
        agg_t = Tensor(agg)

        for layer in range(self.n_layers):
            efeat = ad.concat([ad.take_rows(h, src), ad.take_rows(h, dst), geom], axis=1)
            emsg = ad.silu(
                ad.add(ad.matmul(efeat, self.params[f"w_emsg{layer}"]), self.params[f"b_emsg{layer}"])
            )
            pooled = ad.matmul(agg_t, emsg)
            update = ad.add(
                ad.add(
                    ad.matmul(h, self.params[f"w_self{layer}"]),
                    ad.matmul(pooled, self.params[f"w_msg{layer}"]),
                ),
                self.params[f"b_node{layer}"],
            )
            h = ad.add(h, ad.silu(update))

        # per-edge velocity contributions (averaged over neighbors) plus a
        # per-node drift with no positional dependence
        efeat = ad.concat([ad.take_rows(h, src), ad.take_rows(h, dst), geom], axis=1)
        ew_hidden = ad.silu(
            ad.add(ad.matmul(efeat, self.params["w_edge_w1"]), self.params["b_edge_w1"])
        )
        ew = ad.add(ad.matmul(ew_hidden, self.params["w_edge_w2"]), self.params["b_edge_w2"])
        v_edges = ad.matmul(agg_t, ew)

        node_hidden = ad.silu(ad.add(ad.matmul(h, self.params["w_node_v1"]), self.params["b_node_v1"]))
        v_nodes = ad.add(ad.matmul(node_hidden, self.params["w_node_v2"]), self.params["b_node_v2"])
        return ad.add(v_edges, v_nodes)

    def predict_velocity(self, lattice, species, x, t, conditions=None) -> np.ndarray:
        return self.velocity_graph(lattice, species, x, t, conditions).data

    # ------------------------------------------------------------------ io

    def save(self, path):
        obj = {
            "version": CHECKPOINT_VERSION,
            "kind": "position-flow",
            "species": list(self.species),
            "hidden": self.hidden,
            "n_layers": self.n_layers,
            "torus": self.torus,
            "condition_props": self.condition_props,
            "lat_mean": self.lat_standardizer.mean.tolist(),
            "lat_std": self.lat_standardizer.std.tolist(),
            "cond_mean": self.cond_standardizer.mean.tolist(),
            "cond_std": self.cond_standardizer.std.tolist(),
            "params": {k: v.data.tolist() for k, v in self.params.items()},
        }
        with open(path, "w") as fh:
            json.dump(obj, fh)

    @classmethod
    def load(cls, path) -> "PositionFlowModel":
        with open(path) as fh:
            obj = json.load(fh)
        model = cls(
            tuple(obj["species"]),
            hidden=obj["hidden"],
            n_layers=obj["n_layers"],
            condition_props=obj["condition_props"],
            lat_standardizer=Standardizer(np.array(obj["lat_mean"]), np.array(obj["lat_std"])),
            cond_standardizer=Standardizer(np.array(obj["cond_mean"]), np.array(obj["cond_std"])),
            torus=bool(obj["torus"]),
        )
        for k, v in obj["params"].items():
            model.params[k] = Tensor(np.array(v), requires_grad=True)
        return model


def flow_loss(model: PositionFlowModel, lattice, species, sample: FlowSample, conditions=None):
    """Squared-error objective against the target velocities."""
    pred = model.velocity_graph(lattice, species, sample.x_in, sample.t, conditions)
    return ad.mse(pred, sample.v)


def _batched_update(model, items, optimizer) -> float:
    """One optimizer step on the mean loss over (lattice, species, sample,
    conditions) items; returns the mean loss."""
    optimizer.zero_grad()
    total = 0.0
    inv_n = 1.0 / len(items)
    for lattice, species, sample, conds in items:
        loss = flow_loss(model, lattice, species, sample, conds)
        ad.scale(loss, inv_n).backward()
        total += loss.item()
    optimizer.step()
    return total * inv_n


def train_steps_on_samples(model, lattice, species, samples, optimizer, conditions=None, steps=1):
    """Repeatedly fit a fixed list of flow samples; returns the last mean loss."""
    items = [(lattice, species, s, conditions) for s in samples]
    last = float("nan")
    for _ in range(steps):
        last = _batched_update(model, items, optimizer)
    return last


def train_epoch_flow(
    model: PositionFlowModel,
    records,
    optimizer,
    rng: np.random.Generator,
    pairs_per_crystal: int = 4,
    batch_size: int = 16,
) -> float:
    """One pass over the corpus with freshly drawn flow pairs; returns mean MSE."""
    items = []
    for rec in records:
        conds = _record_conditions(model, rec)
        for _ in range(pairs_per_crystal):
            sample = make_training_pair(rec.crystal, rng, torus=model.torus)
            items.append((rec.crystal.lattice, rec.crystal.species, sample, conds))
    order = rng.permutation(len(items))
    losses = []
    for start in range(0, len(items), batch_size):
        batch = [items[i] for i in order[start : start + batch_size]]
        losses.append(_batched_update(model, batch, optimizer))
    return float(np.mean(losses))


def _record_conditions(model: PositionFlowModel, rec):
    if not model.condition_props:
        return None
    return {p: rec.properties[p] for p in model.condition_props if p in rec.properties}


def train_position_model(
    records,
    table=None,
    epochs: int = 100,
    lr: float = 1e-3,
    hidden: int = 128,
    n_layers: int = 4,
    pairs_per_crystal: int = 4,
    condition_props: list[str] | None = None,
    torus: bool = True,
    seed: int = 0,
    optimizer_kind: str = "adam",
) -> tuple[PositionFlowModel, list[float]]:
    """Fit the position flow model on dataset records."""
    symbols: set[str] = set()
    for rec in records:
        symbols.update(rec.crystal.species)
    if table is not None:
        ordered = tuple(sorted(symbols, key=table.atomic_number))
    else:
        ordered = tuple(sorted(symbols))
    lat_std = Standardizer.fit([lattice_invariants(r.crystal.lattice) for r in records])
    condition_props = list(condition_props or [])
    cond_std = (
        Standardizer.fit([[r.properties[p] for p in condition_props] for r in records])
        if condition_props
        else None
    )
    model = PositionFlowModel(
        ordered,
        hidden=hidden,
        n_layers=n_layers,
        condition_props=condition_props,
        lat_standardizer=lat_std,
        cond_standardizer=cond_std,
        torus=torus,
        seed=seed,
    )
    optimizer = ad.make_optimizer(model.parameters(), lr=lr, kind=optimizer_kind)
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(epochs):
        # linear decay to a tenth of the initial rate sharpens late training
        optimizer.lr = lr * (1.0 - 0.9 * epoch / max(epochs - 1, 1))
        history.append(train_epoch_flow(model, records, optimizer, rng, pairs_per_crystal))
    return model, history


def integrate(
    model: PositionFlowModel,
    lattice: Lattice,
    species,
    num_steps: int,
    rng: np.random.Generator,
    conditions=None,
) -> np.ndarray:
    """Euler-integrate the learned field from uniform noise back to data.

    Time steps from 1 toward 0 in ``num_steps`` uniform decrements, applying
    X <- wrap(X - v / num_steps) at each step; output lies in [0,1)^{Nx3}.
    """
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    n = len(species)
    x = rng.random((n, 3))
    if n == 0:
        return x
    for k in range(num_steps):
        t = 1.0 - k / num_steps
        v = model.predict_velocity(lattice, species, x, t, conditions)
        x = wrap_frac(x - v / num_steps)
    return x
