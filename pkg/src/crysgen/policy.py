"""Rejection policies for guided generation.

Three flavors: a stepwise discriminator consulted on partial prefixes, a
whole-composition discriminator consulted once after atom generation, and a
deterministic charge-neutrality check over the cross-product of allowed
oxidation states.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .atoms import AtomGenModel, CandidateRejected, Standardizer, TokenVocabulary
from .autodiff import Tensor
from .core import Crystal, ElementTable, lattice_invariants

log = logging.getLogger(__name__)

POLICIES = ("none", "partial", "full", "smact")
DEFAULT_THRESHOLD = 0.5
STATE_SEARCH_CAP = 10**6


@dataclass(frozen=True)
class PolicyVerdict:
    accept: bool
    reason: str = ""
    stage: str = "post-atoms"  # or "per-step"

    def __post_init__(self):
        if not self.accept and not self.reason:
            raise ValueError("a rejection needs a reason")


@dataclass(frozen=True)
class Composition:
    """Element symbol -> positive atom count."""

    counts: dict[str, int]

    def __post_init__(self):
        if not self.counts:
            raise ValueError("composition must contain at least one element")
        if any(c < 1 for c in self.counts.values()):
            raise ValueError("composition counts must be >= 1")

    @classmethod
    def from_species(cls, species) -> "Composition":
        counts: dict[str, int] = {}
        for s in species:
            counts[s] = counts.get(s, 0) + 1
        return cls(counts)


def charge_balanced(comp: Composition, table: ElementTable) -> bool:
    """True iff some assignment of one allowed state per element sums to zero.

    The search walks the cross-product of allowed states with reachable-sum
    pruning; compositions whose cross-product exceeds the cap are accepted
    with a warning (desk-scale inputs stay far below it).
    """
    items = [(table.states(sym), count) for sym, count in sorted(comp.counts.items())]
    total = 1
    for states, _ in items:
        total *= len(states)
    if total > STATE_SEARCH_CAP:
        log.warning(
            "charge_balanced: %d state assignments exceeds cap %d; accepting",
            total,
            STATE_SEARCH_CAP,
        )
        return True

    # min/max achievable charge from the remaining elements, for pruning
    suffix_min = [0] * (len(items) + 1)
    suffix_max = [0] * (len(items) + 1)
    for i in range(len(items) - 1, -1, -1):
        states, count = items[i]
        suffix_min[i] = suffix_min[i + 1] + count * min(states)
        suffix_max[i] = suffix_max[i + 1] + count * max(states)

    def search(i: int, charge: int) -> bool:
        if i == len(items):
            return charge == 0
        if charge + suffix_min[i] > 0 or charge + suffix_max[i] < 0:
            return False
        states, count = items[i]
        return any(search(i + 1, charge + count * s) for s in states)

    return search(0, 0)


def perturb_crystal(crystal: Crystal, rng: np.random.Generator, mode: str, vocabulary) -> Crystal:
    """Corrupt a crystal by removing, adding, or swapping one atom."""
    species = list(crystal.species)
    coords = crystal.frac_coords.copy()
    if mode == "remove":
        if len(species) < 2:
            raise ValueError("cannot remove from a single-atom crystal")
        i = int(rng.integers(len(species)))
        del species[i]
        coords = np.delete(coords, i, axis=0)
    elif mode == "add":
        species.append(vocabulary[int(rng.integers(len(vocabulary)))])
        coords = np.vstack([coords, rng.random(3)])
    elif mode == "swap":
        i = int(rng.integers(len(species)))
        choices = [s for s in vocabulary if s != species[i]]
        species[i] = choices[int(rng.integers(len(choices)))]
    else:
        raise ValueError(f"unknown perturbation mode {mode!r}")
    return Crystal(crystal.lattice, species, coords)


class DiscriminatorModel:
    """Invariant classifier over (atom multiset, lattice invariants).

    Same backbone family as the atom generator, with a sigmoid head; scores
    near 1 mean "looks like a real crystal".
    """

    def __init__(self, vocab: TokenVocabulary, hidden: int = 64, n_layers: int = 2,
                 lat_standardizer: Standardizer | None = None, seed: int = 0):
        self._net = AtomGenModel(
            vocab,
            hidden=hidden,
            n_layers=n_layers,
            lat_standardizer=lat_standardizer,
            seed=seed,
        )
        # replace the categorical readout with a single-logit head
        rng = np.random.default_rng(seed + 1)
        self._net.params["w_head2"] = Tensor(
            rng.standard_normal((hidden, 1)) / np.sqrt(hidden), requires_grad=True
        )
        self._net.params["b_head2"] = Tensor(np.zeros(1), requires_grad=True)
        self.holdout_accuracy: float | None = None

    @property
    def vocab(self) -> TokenVocabulary:
        return self._net.vocab

    def parameters(self):
        return self._net.parameters()

    def logit(self, lattice_inv, species) -> Tensor:
        tokens = list(species)
        logits = self._net.forward_logits(lattice_inv, tokens)
        return ad.reshape(logits, (1,))

    def score(self, lattice_inv, species) -> float:
        """Probability in [0,1] that the (partial) crystal is real."""
        return float(ad.sigmoid(self.logit(lattice_inv, species)).data[0])

    def save(self, path):
        self._net.save(path)
        with open(path) as fh:
            obj = json.load(fh)
        obj["kind"] = "discriminator"
        obj["holdout_accuracy"] = self.holdout_accuracy
        with open(path, "w") as fh:
            json.dump(obj, fh)

    @classmethod
    def load(cls, path) -> "DiscriminatorModel":
        net = AtomGenModel.load(path)
        model = cls.__new__(cls)
        model._net = net
        with open(path) as fh:
            model.holdout_accuracy = json.load(fh).get("holdout_accuracy")
        return model


def train_discriminator(
    records,
    table=None,
    epochs: int = 20,
    lr: float = 1e-3,
    hidden: int = 64,
    n_layers: int = 2,
    perturb_ratio: float = 1.0,
    holdout_fraction: float = 0.2,
    seed: int = 0,
) -> DiscriminatorModel:
    """Train real-vs-perturbed classification; records held-out accuracy."""
    rng = np.random.default_rng(seed)
    vocab = TokenVocabulary.from_records(records, table)
    from .core import lattice_invariants as _inv

    lat_std = Standardizer.fit([_inv(r.crystal.lattice) for r in records])
    model = DiscriminatorModel(vocab, hidden=hidden, n_layers=n_layers,
                               lat_standardizer=lat_std, seed=seed)

    examples: list[tuple[tuple, list[str], float]] = []
    modes = ["swap", "add", "remove"]
    for rec in records:
        inv = _inv(rec.crystal.lattice)
        examples.append((inv, list(rec.crystal.species), 1.0))
        n_fake = max(1, int(round(perturb_ratio)))
        for _ in range(n_fake):
            mode = modes[int(rng.integers(len(modes)))]
            if mode == "remove" and rec.crystal.num_atoms < 2:
                mode = "swap"
            fake = perturb_crystal(rec.crystal, rng, mode, list(vocab.symbols))
            examples.append((inv, list(fake.species), 0.0))

    order = rng.permutation(len(examples))
    n_holdout = max(1, int(len(examples) * holdout_fraction))
    holdout = [examples[i] for i in order[:n_holdout]]
    train = [examples[i] for i in order[n_holdout:]]

    optimizer = ad.make_optimizer(model.parameters(), lr=lr)
    for _ in range(epochs):
        for i in rng.permutation(len(train)):
            inv, species, label = train[i]
            optimizer.zero_grad()
            loss = ad.logistic_loss(model.logit(inv, species), label)
            loss.backward()
            optimizer.step()

    correct = sum(
        1 for inv, species, label in holdout
        if (model.score(inv, species) >= 0.5) == (label == 1.0)
    )
    model.holdout_accuracy = correct / len(holdout)
    return model


@dataclass
class PolicyConfig:
    """Which policy runs and with what discriminator threshold."""

    name: str = "none"
    threshold: float = DEFAULT_THRESHOLD
    discriminator: DiscriminatorModel | None = None
    table: ElementTable | None = None

    def __post_init__(self):
        if self.name not in POLICIES:
            raise ValueError(f"unknown policy {self.name!r}; choose from {POLICIES}")
        if self.name in ("partial", "full") and self.discriminator is None:
            raise ValueError(f"policy {self.name!r} requires a discriminator model")
        if self.name == "smact" and self.table is None:
            raise ValueError("policy 'smact' requires an element table")


def apply_policy(policy: PolicyConfig, lattice, species, stage: str) -> PolicyVerdict:
    """Evaluate one policy on a partial ("per-step") or complete ("post-atoms")
    atom list plus lattice. Policies only fire at their own stage."""
    if policy.name == "none":
        return PolicyVerdict(True, stage=stage)
    if policy.name == "partial":
        if stage != "per-step":
            return PolicyVerdict(True, stage=stage)
        inv = lattice_invariants(lattice)
        score = policy.discriminator.score(inv, species)
        if score < policy.threshold:
            return PolicyVerdict(False, f"discriminator score {score:.3f} below {policy.threshold}", stage)
        return PolicyVerdict(True, stage=stage)
    if stage != "post-atoms":
        return PolicyVerdict(True, stage=stage)
    if policy.name == "full":
        inv = lattice_invariants(lattice)
        score = policy.discriminator.score(inv, species)
        if score < policy.threshold:
            return PolicyVerdict(False, f"discriminator score {score:.3f} below {policy.threshold}", stage)
        return PolicyVerdict(True, stage=stage)
    # smact
    if not species:
        return PolicyVerdict(False, "empty composition", stage)
    comp = Composition.from_species(species)
    if not charge_balanced(comp, policy.table):
        return PolicyVerdict(False, "not charge-balanced", stage)
    return PolicyVerdict(True, stage=stage)


__all__ = [
    "POLICIES",
    "PolicyVerdict",
    "Composition",
    "PolicyConfig",
    "charge_balanced",
    "perturb_crystal",
    "DiscriminatorModel",
    "train_discriminator",
    "apply_policy",
    "CandidateRejected",
]
