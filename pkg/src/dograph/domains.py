"""Synthetic text domains as order-1 Markov chains over a shared vocabulary.

Every domain has the same support (all token sequences over ``V``) and differs
only in its measure. Built-in scenarios are generated from small JSON-able
recipes, so a scenario file and a built-in scenario go through the same
construction path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import Sample
from .numerics import make_rng

SCENARIO_SCHEMA_VERSION = 1
DEFAULT_VOCAB = 32


@dataclass
class DomainSpec:
    id: int
    name: str
    transition: np.ndarray
    initial: np.ndarray

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.initial = np.asarray(self.initial, dtype=np.float64)
        V = self.initial.shape[0]
        if self.transition.shape != (V, V):
            raise ValueError(f"domain {self.name!r}: transition shape {self.transition.shape} "
                             f"does not match initial length {V}")
        if np.any(self.transition < 0) or np.any(np.abs(self.transition.sum(axis=1) - 1) > 1e-12):
            raise ValueError(f"domain {self.name!r}: transition is not row-stochastic")
        if np.any(self.initial < 0) or abs(self.initial.sum() - 1) > 1e-12:
            raise ValueError(f"domain {self.name!r}: initial is not a probability vector")

    @property
    def vocab_size(self) -> int:
        return self.initial.shape[0]


@dataclass
class MixtureSpec:
    domains: list[DomainSpec]
    proportions: np.ndarray
    name: str = "custom"
    recipe: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        self.proportions = np.asarray(self.proportions, dtype=np.float64)
        if not self.domains:
            raise ValueError("a mixture needs at least one domain")
        if self.proportions.shape != (len(self.domains),):
            raise ValueError(f"{len(self.domains)} domains but {self.proportions.size} proportions")
        if np.any(self.proportions < 0) or abs(self.proportions.sum() - 1) > 1e-9:
            raise ValueError(f"proportions {self.proportions.tolist()} are not on the simplex")
        if len({d.vocab_size for d in self.domains}) != 1:
            raise ValueError("all domains must share one vocabulary")

    @property
    def vocab_size(self) -> int:
        return self.domains[0].vocab_size

    @property
    def n_domains(self) -> int:
        return len(self.domains)


def _draw_next(cdf_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    # cdf_rows: (..., V); strict '>' picks the first bin whose cdf exceeds u
    idx = (cdf_rows <= u[..., None]).sum(axis=-1)
    return np.minimum(idx, cdf_rows.shape[-1] - 1)


def sample_sequence(spec: DomainSpec, n: int, rng: np.random.Generator) -> Sample:
    """Draw ``n + 1`` chain states; tokens are the first ``n``, targets the last ``n``."""
    if n < 2:
        raise ValueError(f"sequence length must be >= 2, got {n}")
    cdf = np.cumsum(spec.transition, axis=1)
    init_cdf = np.cumsum(spec.initial)
    u = rng.random(n + 1)
    seq = np.empty(n + 1, dtype=np.int64)
    seq[0] = _draw_next(init_cdf, u[:1])[0]
    for t in range(n):
        seq[t + 1] = _draw_next(cdf[seq[t]], u[t + 1:t + 2])[0]
    return Sample(seq[:-1], seq[1:], spec.id)


def sample_domain_sequences(spec: DomainSpec, count: int, n: int,
                            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized draw of ``count`` sequences from one domain."""
    cdf = np.cumsum(spec.transition, axis=1)
    u = rng.random((count, n + 1))
    seq = np.empty((count, n + 1), dtype=np.int64)
    seq[:, 0] = _draw_next(np.cumsum(spec.initial)[None, :], u[:, 0])
    for t in range(n):
        seq[:, t + 1] = _draw_next(cdf[seq[:, t]], u[:, t + 1])
    return seq[:, :-1], seq[:, 1:]


def sample_batch_arrays(mix: MixtureSpec, batch: int, n: int, rng: np.random.Generator,
                        proportions=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw ``batch`` samples as ``(tokens, targets, domain_ids)`` arrays.

    Domain ids are drawn i.i.d. from ``proportions`` (the mixture's own by
    default), then each domain's sequences are drawn in one vectorized pass.
    """
    if batch < 1:
        raise ValueError(f"batch size must be >= 1, got {batch}")
    p = mix.proportions if proportions is None else np.asarray(proportions, dtype=np.float64)
    labels = _draw_next(np.cumsum(p)[None, :], rng.random(batch))
    tokens = np.empty((batch, n), dtype=np.int64)
    targets = np.empty((batch, n), dtype=np.int64)
    for j, spec in enumerate(mix.domains):
        idx = np.flatnonzero(labels == j)
        if idx.size:
            tokens[idx], targets[idx] = sample_domain_sequences(spec, idx.size, n, rng)
    return tokens, targets, np.array([mix.domains[j].id for j in labels], dtype=np.int64)


def sample_batch(mix: MixtureSpec, batch: int, n: int, rng: np.random.Generator,
                 proportions=None) -> list[Sample]:
    tokens, targets, labels = sample_batch_arrays(mix, batch, n, rng, proportions)
    return [Sample(tokens[i], targets[i], int(labels[i])) for i in range(batch)]


def stationary_distribution(transition: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eig(np.asarray(transition).T)
    v = np.real(vecs[:, np.argmin(np.abs(vals - 1.0))])
    v = np.abs(v)
    return v / v.sum()


# -- chain constructions ---------------------------------------------------

def _band(lo: int, hi: int, V: int) -> np.ndarray:
    mask = np.zeros(V)
    mask[lo:hi] = 1.0
    return mask


def _chain_banded(V, rng, band, concentration=0.5, leak=0.1):
    """Dense random rows on a token band, with ``leak`` mass spread over all of V."""
    lo, hi = band
    T = np.full((V, V), leak / V)
    T[:, lo:hi] += (1 - leak) * rng.dirichlet(np.full(hi - lo, concentration), size=V)
    return T, _band(lo, hi, V) / (hi - lo)


def _chain_cycle(V, rng, band, stay=0.9, leak=0.05):
    """Near-deterministic walk along a random cyclic order of the band."""
    lo, hi = band
    L = hi - lo
    order = lo + rng.permutation(L)
    nxt = order[np.arange(V) % L]  # off-band tokens re-enter the band
    nxt[order] = np.roll(order, -1)
    T = np.full((V, V), leak / V)
    T[np.arange(V), nxt] += stay
    T[:, lo:hi] += (1 - stay - leak) / (hi - lo)
    return T, _band(lo, hi, V) / (hi - lo)


def _chain_sparse(V, rng, band, successors=2, leak=0.05):
    """Each row jumps to a few random band tokens."""
    lo, hi = band
    T = np.full((V, V), leak / V)
    for r in range(V):
        cols = lo + rng.choice(hi - lo, size=successors, replace=False)
        T[r, cols] += (1 - leak) * rng.dirichlet(np.ones(successors))
    return T, _band(lo, hi, V) / (hi - lo)


def _chain_permutation(V, rng, band=None):
    """Deterministic chain: a single random cycle through the whole vocabulary."""
    order = rng.permutation(V)
    T = np.zeros((V, V))
    T[order, np.roll(order, -1)] = 1.0
    return T, np.full(V, 1.0 / V)


def _chain_uniform(V, rng, band=None):
    return np.full((V, V), 1.0 / V), np.full(V, 1.0 / V)


CHAIN_KINDS = {
    "banded": _chain_banded,
    "cycle": _chain_cycle,
    "sparse": _chain_sparse,
    "permutation": _chain_permutation,
    "uniform": _chain_uniform,
}


def _normalize_rows(T: np.ndarray) -> np.ndarray:
    T = np.maximum(T, 0.0)
    return T / T.sum(axis=1, keepdims=True)


def build_mixture(recipe: dict) -> MixtureSpec:
    """Construct a mixture from a scenario recipe (the scenario-file schema).

    Recipe keys: ``schema_version``, ``name``, ``vocab_size``, ``proportions``
    and ``domains``, a list of ``{"name", "kind", "seed", "band"?, "params"?,
    "interpolate"?}``. ``interpolate = {"with": j, "alpha": a}`` mixes the
    domain's matrix with domain ``j``'s base matrix as ``(1 - a) T + a T_j``.
    """
    version = recipe.get("schema_version")
    if version != SCENARIO_SCHEMA_VERSION:
        raise ValueError(f"scenario schema_version must be {SCENARIO_SCHEMA_VERSION}, got {version!r}")
    V = int(recipe["vocab_size"])
    entries = recipe["domains"]
    if len(entries) != len(recipe["proportions"]):
        raise ValueError("scenario: domains and proportions differ in length")
    base = []
    for entry in entries:
        kind = entry["kind"]
        if kind not in CHAIN_KINDS:
            raise ValueError(f"scenario: unknown chain kind {kind!r}")
        rng = make_rng(entry["seed"])
        band = tuple(entry.get("band", (0, V)))
        if not 0 <= band[0] < band[1] <= V:
            raise ValueError(f"scenario: band {band} outside [0, {V}]")
        base.append(CHAIN_KINDS[kind](V, rng, band, **entry.get("params", {})))
    domains = []
    for i, (entry, (T, init)) in enumerate(zip(entries, base)):
        mix_with = entry.get("interpolate")
        if mix_with:
            a = float(mix_with["alpha"])
            Tj, init_j = base[int(mix_with["with"])]
            T = (1 - a) * T + a * Tj
            init = (1 - a) * init + a * init_j
        domains.append(DomainSpec(i, entry["name"], _normalize_rows(T), init / init.sum()))
    return MixtureSpec(domains, np.asarray(recipe["proportions"], dtype=np.float64),
                       recipe.get("name", "custom"), recipe)


def _thirds(V):
    a, b = V // 3, 2 * V // 3
    return [(0, a), (a, b), (b, V)]


def _scenario_recipes(V: int = DEFAULT_VOCAB) -> dict[str, dict]:
    thirds = _thirds(V)
    quarters = [(i * V // 4, (i + 1) * V // 4) for i in range(4)]
    return {
        "balanced-3": {
            "schema_version": SCENARIO_SCHEMA_VERSION, "name": "balanced-3", "vocab_size": V,
            "proportions": [1 / 3, 1 / 3, 1 / 3],
            "domains": [{"name": f"band{i}", "kind": "banded", "seed": 100 + i,
                         "band": list(thirds[i])} for i in range(3)],
        },
        "skewed-3": {
            "schema_version": SCENARIO_SCHEMA_VERSION, "name": "skewed-3", "vocab_size": V,
            "proportions": [0.80, 0.15, 0.05],
            "domains": [
                {"name": "web", "kind": "banded", "seed": 200, "band": list(thirds[0]),
                 "params": {"concentration": 0.2, "leak": 0.02}},
                {"name": "code", "kind": "cycle", "seed": 201, "band": list(thirds[1]),
                 "params": {"stay": 0.7, "leak": 0.1}},
                {"name": "math", "kind": "sparse", "seed": 202, "band": list(thirds[2]),
                 "params": {"successors": 3, "leak": 0.1}},
            ],
        },
        "overlap-4": {
            "schema_version": SCENARIO_SCHEMA_VERSION, "name": "overlap-4", "vocab_size": V,
            "proportions": [0.25] * 4,
            "domains": [{"name": f"blend{i}", "kind": "banded", "seed": 300 + i,
                         "band": list(quarters[i]),
                         "interpolate": {"with": (i + 1) % 4, "alpha": 0.25}}
                        for i in range(4)],
        },
    }


def builtin_scenarios(vocab_size: int = DEFAULT_VOCAB) -> dict[str, MixtureSpec]:
    return {name: build_mixture(r) for name, r in _scenario_recipes(vocab_size).items()}


def get_scenario(name: str, vocab_size: int = DEFAULT_VOCAB) -> MixtureSpec:
    recipes = _scenario_recipes(vocab_size)
    if name not in recipes:
        raise KeyError(f"unknown scenario {name!r}; available: {sorted(recipes)}")
    return build_mixture(recipes[name])


def load_scenario(path) -> MixtureSpec:
    return build_mixture(json.loads(Path(path).read_text()))


def save_scenario(path, mix: MixtureSpec) -> None:
    if mix.recipe is None:
        raise ValueError("only recipe-built mixtures can be saved")
    Path(path).write_text(json.dumps(mix.recipe, indent=2, sort_keys=True) + "\n")
