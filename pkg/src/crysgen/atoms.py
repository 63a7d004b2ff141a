"""Autoregressive atom-type generation with permutation-invariant targets.

The model is an invariant message-passing network over the unordered prefix
multiset (plus a START node). Training minimizes the KL divergence between
the model distribution and the categorical distribution of the atoms still
missing from the crystal; the END token carries all mass once nothing
remains, which is how the atom count is decided at sampling time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core import lattice_invariants

CHECKPOINT_VERSION = 1
START = "<start>"
END = "<end>"


@dataclass(frozen=True)
class TokenVocabulary:
    """Corpus element symbols followed by the START and END virtual tokens."""

    symbols: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("duplicate symbols in vocabulary")

    @property
    def size(self) -> int:
        return len(self.symbols) + 2

    @property
    def start_index(self) -> int:
        return len(self.symbols)

    @property
    def end_index(self) -> int:
        return len(self.symbols) + 1

    def index(self, symbol: str) -> int:
        if symbol == START:
            return self.start_index
        if symbol == END:
            return self.end_index
        try:
            return self.symbols.index(symbol)
        except ValueError:
            raise KeyError(f"symbol {symbol!r} not in vocabulary") from None

    @classmethod
    def from_records(cls, records, table=None) -> "TokenVocabulary":
        seen = set()
        for rec in records:
            seen.update(rec.crystal.species)
        if table is not None:
            ordered = sorted(seen, key=lambda s: table.atomic_number(s))
        else:
            ordered = sorted(seen)
        return cls(tuple(ordered))


def build_target_distribution(remaining, vocab: TokenVocabulary) -> np.ndarray:
    """Uniform categorical over the remaining multiset; all mass on END if empty."""
    target = np.zeros(vocab.size)
    remaining = list(remaining)
    if not remaining:
        target[vocab.end_index] = 1.0
        return target
    for sym in remaining:
        idx = vocab.index(sym)
        if idx >= vocab.start_index:
            raise KeyError(f"virtual token {sym!r} cannot appear in a remaining multiset")
        target[idx] += 1.0
    return target / target.sum()


def _init_param(rng, shape, scale=None):
    if scale is None:
        scale = 1.0 / np.sqrt(shape[0])
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def __call__(self, values) -> np.ndarray:
        return (np.asarray(values, dtype=float) - self.mean) / self.std

    @classmethod
    def fit(cls, rows) -> "Standardizer":
        arr = np.atleast_2d(np.asarray(rows, dtype=float))
        std = arr.std(axis=0)
        return cls(arr.mean(axis=0), np.where(std < 1e-8, 1.0, std))


class AtomGenModel:
    """Permutation-invariant network mapping (lattice invariants, prefix multiset)
    to a distribution over next tokens."""

    def __init__(
        self,
        vocab: TokenVocabulary,
        hidden: int = 128,
        n_layers: int = 4,
        condition_props: list[str] | None = None,
        lat_standardizer: Standardizer | None = None,
        cond_standardizer: Standardizer | None = None,
        seed: int = 0,
    ):
        self.vocab = vocab
        self.hidden = hidden
        self.n_layers = n_layers
        self.condition_props = list(condition_props or [])
        self.lat_standardizer = lat_standardizer or Standardizer(np.zeros(6), np.ones(6))
        ncond = len(self.condition_props)
        self.cond_standardizer = cond_standardizer or Standardizer(np.zeros(ncond), np.ones(ncond))
        rng = np.random.default_rng(seed)
        h = hidden
        in_dim = h + 6 + 2 * ncond
        self.params: dict[str, Tensor] = {
            "embed": _init_param(rng, (vocab.size, h), scale=0.5),
            "w_in": _init_param(rng, (in_dim, h)),
            "b_in": Tensor(np.zeros(h), requires_grad=True),
            "w_head1": _init_param(rng, (h, h)),
            "b_head1": Tensor(np.zeros(h), requires_grad=True),
            # zero-initialized readout: untrained model outputs a uniform distribution
            "w_head2": Tensor(np.zeros((h, vocab.size)), requires_grad=True),
            "b_head2": Tensor(np.zeros(vocab.size), requires_grad=True),
        }
        for layer in range(n_layers):
            self.params[f"w_self{layer}"] = _init_param(rng, (h, h))
            self.params[f"w_agg{layer}"] = _init_param(rng, (h, h))
            self.params[f"b{layer}"] = Tensor(np.zeros(h), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def _condition_features(self, conditions: dict[str, float] | None) -> np.ndarray:
        """Standardized value plus presence flag per configured property."""
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

    def forward_logits(self, lattice_inv, prefix, conditions=None) -> Tensor:
        """Differentiable logits over the vocabulary for START + prefix multiset."""
        tokens = [self.vocab.start_index] + [self.vocab.index(s) for s in prefix]
        n = len(tokens)
        lat = self.lat_standardizer(lattice_inv)
        cond = self._condition_features(conditions)
        extra = np.tile(np.concatenate([lat, cond]), (n, 1))
        feats = ad.concat([ad.take_rows(self.params["embed"], tokens), Tensor(extra)], axis=1)
        x = ad.silu(ad.add(ad.matmul(feats, self.params["w_in"]), self.params["b_in"]))
        for layer in range(self.n_layers):
            agg = ad.reshape(ad.tensor_mean(x, axis=0), (1, self.hidden))
            msg = ad.add(
                ad.add(
                    ad.matmul(x, self.params[f"w_self{layer}"]),
                    ad.matmul(agg, self.params[f"w_agg{layer}"]),
                ),
                self.params[f"b{layer}"],
            )
            x = ad.add(x, ad.silu(msg))
        pooled = ad.reshape(ad.tensor_mean(x, axis=0), (1, self.hidden))
        hidden = ad.silu(ad.add(ad.matmul(pooled, self.params["w_head1"]), self.params["b_head1"]))
        logits = ad.add(ad.matmul(hidden, self.params["w_head2"]), self.params["b_head2"])
        return ad.reshape(logits, (-1,))

    def forward(self, lattice_inv, prefix, conditions=None) -> np.ndarray:
        """Next-token distribution (softmax of the logits) as a plain array."""
        logits = self.forward_logits(lattice_inv, prefix, conditions)
        return ad.softmax(logits).data

    # ------------------------------------------------------------------ io

    def save(self, path):
        obj = {
            "version": CHECKPOINT_VERSION,
            "kind": "atom-gen",
            "symbols": list(self.vocab.symbols),
            "hidden": self.hidden,
            "n_layers": self.n_layers,
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
    def load(cls, path) -> "AtomGenModel":
        with open(path) as fh:
            obj = json.load(fh)
        model = cls(
            TokenVocabulary(tuple(obj["symbols"])),
            hidden=obj["hidden"],
            n_layers=obj["n_layers"],
            condition_props=obj["condition_props"],
            lat_standardizer=Standardizer(np.array(obj["lat_mean"]), np.array(obj["lat_std"])),
            cond_standardizer=Standardizer(np.array(obj["cond_mean"]), np.array(obj["cond_std"])),
        )
        for k, v in obj["params"].items():
            model.params[k] = Tensor(np.array(v), requires_grad=True)
        return model


DEFAULT_LOGIT_REG = 1e-3


def prefix_loss(
    model: AtomGenModel, lattice_inv, prefix, remaining, conditions=None, logit_reg: float = 0.0
) -> Tensor:
    """KL(model distribution || remaining-atoms target) for one training prefix.

    ``logit_reg`` adds an L2 penalty on the raw logits. The penalty keeps the
    softmax away from exact one-hot saturation, where the KL objective has a
    numerically zero gradient and optimization can stall on a wrong mode.
    """
    target = build_target_distribution(remaining, model.vocab)
    logits = model.forward_logits(lattice_inv, prefix, conditions)
    loss = ad.kl_divergence(ad.softmax(logits), target)
    if logit_reg:
        loss = ad.add(loss, ad.scale(ad.tensor_sum(ad.multiply(logits, logits)), logit_reg))
    return loss


def train_epoch(
    model: AtomGenModel,
    records,
    optimizer,
    rng: np.random.Generator,
    batch_size: int = 32,
    logit_reg: float = DEFAULT_LOGIT_REG,
) -> float:
    """One pass over the corpus: one random prefix per size t in {0..N} per
    crystal, updated in mini-batches on the mean loss.

    Returns the mean KL loss over all prefixes visited.
    """
    items = []
    for rec in records:
        species = list(rec.crystal.species)
        inv = lattice_invariants(rec.crystal.lattice)
        conds = _record_conditions(model, rec)
        n = len(species)
        for t in range(n + 1):
            perm = rng.permutation(n)
            prefix = [species[i] for i in perm[:t]]
            remaining = [species[i] for i in perm[t:]]
            items.append((inv, prefix, remaining, conds))
    order = rng.permutation(len(items))
    losses = []
    for start in range(0, len(items), batch_size):
        batch = [items[i] for i in order[start : start + batch_size]]
        optimizer.zero_grad()
        inv_n = 1.0 / len(batch)
        total = 0.0
        for inv, prefix, remaining, conds in batch:
            loss = prefix_loss(model, inv, prefix, remaining, conds, logit_reg=logit_reg)
            ad.scale(loss, inv_n).backward()
            total += loss.item()
        optimizer.step()
        losses.append(total * inv_n)
    return float(np.mean(losses))


def _record_conditions(model: AtomGenModel, rec) -> dict[str, float] | None:
    if not model.condition_props:
        return None
    return {p: rec.properties[p] for p in model.condition_props if p in rec.properties}


def train_atom_model(
    records,
    table=None,
    epochs: int = 50,
    lr: float = 1e-3,
    hidden: int = 128,
    n_layers: int = 4,
    condition_props: list[str] | None = None,
    seed: int = 0,
    optimizer_kind: str = "adam",
) -> tuple[AtomGenModel, list[float]]:
    """Fit an atom generator on dataset records; returns (model, per-epoch losses)."""
    vocab = TokenVocabulary.from_records(records, table)
    lat_std = Standardizer.fit([lattice_invariants(r.crystal.lattice) for r in records])
    condition_props = list(condition_props or [])
    if condition_props:
        cond_std = Standardizer.fit(
            [[r.properties[p] for p in condition_props] for r in records]
        )
    else:
        cond_std = None
    model = AtomGenModel(
        vocab,
        hidden=hidden,
        n_layers=n_layers,
        condition_props=condition_props,
        lat_standardizer=lat_std,
        cond_standardizer=cond_std,
        seed=seed,
    )
    optimizer = ad.make_optimizer(model.parameters(), lr=lr, kind=optimizer_kind)
    rng = np.random.default_rng(seed)
    history = [train_epoch(model, records, optimizer, rng) for _ in range(epochs)]
    return model, history


def next_token_distribution(
    model: AtomGenModel, lattice_inv, prefix, tau: float, top_p: float, conditions=None
) -> np.ndarray:
    """Sampling distribution for the next token: temperature softmax, START
    masked out, then nucleus filtering."""
    logits = model.forward_logits(lattice_inv, prefix, conditions).data
    dist = ad.temperature_softmax(logits, tau)
    dist[model.vocab.start_index] = 0.0
    dist = dist / dist.sum()
    return ad.nucleus_filter(dist, top_p)


def sample_atoms(
    model: AtomGenModel,
    lattice_inv,
    config,
    rng: np.random.Generator,
    conditions=None,
    step_callback=None,
    collect_distributions: list | None = None,
) -> list[str]:
    """Autoregressively draw element symbols until END or the atom cap.

    ``step_callback``, when given, is called with the partial atom list after
    each emitted atom; returning False aborts the candidate by raising
    ``CandidateRejected``. ``collect_distributions`` receives each per-step
    filtered distribution when provided (used for entropy diagnostics).
    """
    atoms: list[str] = []
    while len(atoms) < config.max_atoms:
        dist = next_token_distribution(
            model, lattice_inv, atoms, config.tau, config.top_p, conditions
        )
        if collect_distributions is not None:
            collect_distributions.append(dist)
        idx = int(rng.choice(model.vocab.size, p=dist))
        if idx == model.vocab.end_index:
            break
        atoms.append(model.vocab.symbols[idx])
        if step_callback is not None and not step_callback(atoms):
            raise CandidateRejected("partial policy rejected the prefix")
    return atoms


class CandidateRejected(RuntimeError):
    """A policy rejected the candidate; the sampler restarts from the lattice stage."""
