"""Accuracy-energy design space exploration.

Everything here minimizes the pair (accuracy_loss, total_energy).
Evaluation is a pure function of (model, data slice, plan, tables,
tuning flag); records are memoized by plan content so exhaustive and
evolutionary search share work.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import multipliers as mx
from .inference import compile_plan, layer_energies, run_model
from .modelio import Dataset, QModel
from .planning import (ApproxPlan, LayerAssignment, PlanError, identity_plan,
                       uniform_llam_plan)


class SpaceError(ValueError):
    """Bad space description or a space too large for exhaustive search."""


class CapacityError(SpaceError):
    """Space size exceeds the exhaustive-mode cap."""


def thread_cap() -> int:
    """Worker parallelism cap; AXNN_THREADS overrides the hardware default."""
    env = os.environ.get("AXNN_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass(frozen=True)
class EvalRecord:
    plan_id: str
    plan: ApproxPlan
    accuracy: float
    accuracy_loss: float
    total_energy: float
    energy_gain: float
    per_layer_energy: tuple[float, ...]

    @property
    def objectives(self) -> tuple[float, float]:
        return (self.accuracy_loss, self.total_energy)


class Evaluator:
    """Evaluates plans on a fixed model + data slice, with memoization."""

    def __init__(
        self,
        model: QModel,
        dataset: Dataset,
        limit: int | None = None,
        tune: bool = False,
        energy_table: dict[str, float] | None = None,
    ):
        if limit is not None:
            if limit < 1:
                raise SpaceError("data slice must be non-empty")
            dataset = Dataset(dataset.images[:limit], dataset.labels[:limit])
        if len(dataset.images) == 0:
            raise SpaceError("data slice must be non-empty")
        self.model = model
        self.dataset = dataset
        self.tune = tune
        self.energy_table = energy_table
        self._table_cache: dict[str, mx.MultTable] = {}
        self._memo: dict[str, EvalRecord] = {}
        self.n_layers = len(model.mult_layer_indices())
        self.baseline = self._evaluate_raw(identity_plan(self.n_layers))
        self._memo[self.baseline.plan_id] = self.baseline

    @property
    def data_digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.dataset.images.tobytes())
        h.update(np.ascontiguousarray(self.dataset.labels).tobytes())
        return h.hexdigest()[:16]

    def _evaluate_raw(self, plan: ApproxPlan) -> EvalRecord:
        compiled = compile_plan(self.model, plan, tune=self.tune,
                                energy_table=self.energy_table,
                                table_cache=self._table_cache)
        _, classes = run_model(self.model, self.dataset.images, compiled)
        accuracy = float((classes == self.dataset.labels).mean())
        per_layer = layer_energies(self.model, compiled)
        total = float(per_layer.sum())
        base = getattr(self, "baseline", None)
        if base is None:  # this is the baseline evaluation itself
            loss, gain = 0.0, 0.0
        else:
            loss = base.accuracy - accuracy
            gain = 1.0 - total / base.total_energy
        return EvalRecord(
            plan_id=plan.plan_id,
            plan=plan,
            accuracy=accuracy,
            accuracy_loss=loss,
            total_energy=total,
            energy_gain=gain,
            per_layer_energy=tuple(per_layer),
        )

    def evaluate(self, plan: ApproxPlan) -> EvalRecord:
        key = plan.plan_id
        if key not in self._memo:
            self._memo[key] = self._evaluate_raw(plan)
        return self._memo[key]

    def evaluate_many(self, plans: list[ApproxPlan]) -> list[EvalRecord]:
        """Evaluate a batch, filling the memo cache in parallel."""
        fresh = {}
        for p in plans:
            if p.plan_id not in self._memo and p.plan_id not in fresh:
                fresh[p.plan_id] = p
        if fresh:
            workers = min(thread_cap(), len(fresh))
            if workers > 1:
                with ThreadPoolExecutor(max_workers=workers) as ex:
                    for rec in ex.map(self._evaluate_raw, fresh.values()):
                        self._memo[rec.plan_id] = rec
            else:
                for p in fresh.values():
                    self._memo[p.plan_id] = self._evaluate_raw(p)
        return [self._memo[p.plan_id] for p in plans]


def dominates(a: tuple[float, float], b: tuple[float, float]) -> bool:
    return a[0] <= b[0] and a[1] <= b[1] and (a[0] < b[0] or a[1] < b[1])


def pareto_filter(records: list[EvalRecord]) -> list[EvalRecord]:
    """Maximal non-dominated subset, sorted by energy ascending.

    Records with identical objectives collapse to the first by plan id.
    """
    ordered = sorted(records, key=lambda r: (r.total_energy, r.accuracy_loss,
                                             r.plan_id))
    front: list[EvalRecord] = []
    best_loss = float("inf")
    for rec in ordered:
        if rec.accuracy_loss < best_loss:
            front.append(rec)
            best_loss = rec.accuracy_loss
    return front


# --- sensitivity sweeps ---


def sweep_single_layer(evaluator: Evaluator, mult_id: str) -> list[EvalRecord]:
    """Spec in one layer at a time, exact elsewhere; index 0 = baseline."""
    records = [evaluator.baseline]
    for m in range(evaluator.n_layers):
        per_layer = tuple(
            LayerAssignment(index=1 if li == m else 0)
            for li in range(evaluator.n_layers)
        )
        plan = ApproxPlan("LLAM", ("exact", mult_id), per_layer)
        records.append(evaluator.evaluate(plan))
    return records


def sweep_prefix(evaluator: Evaluator, mult_id: str) -> list[EvalRecord]:
    """Approximate layers 1..m for m = 0..L (m=0 is the baseline)."""
    records = [evaluator.baseline]
    for m in range(1, evaluator.n_layers + 1):
        per_layer = tuple(
            LayerAssignment(index=1 if li < m else 0)
            for li in range(evaluator.n_layers)
        )
        plan = ApproxPlan("LLAM", ("exact", mult_id), per_layer)
        records.append(evaluator.evaluate(plan))
    return records


# --- configuration spaces ---

DEFAULT_SPACE_CAP = 50_000


@dataclass(frozen=True)
class SearchSpace:
    """A finite, per-layer-factorized plan space.

    Each layer contributes one gene whose options are palette indices
    (LLAM/KLMS), G-tuples of palette indices (FLAM), or cycle tuples
    (KLAM).  An optional final gene picks the KLMS width out of
    ``klms_options``.
    """

    approach: str
    palette: tuple[str, ...]
    n_layers: int
    flavor: str | None = None
    group_count: int = 2
    cycle_length: int = 2
    klms_options: tuple[float | None, ...] = (None,)
    layer_choices: tuple[tuple[int, ...], ...] | None = None  # palette idx subsets

    def __post_init__(self):
        if not self.palette:
            raise SpaceError("palette must not be empty")
        if self.n_layers < 1:
            raise SpaceError("need at least one layer")
        if self.layer_choices is not None and len(self.layer_choices) != self.n_layers:
            raise SpaceError("layer_choices must cover every layer")
        if self.approach == "KLMS" and self.klms_options == (None,):
            raise SpaceError("KLMS space needs klms widths to search")

    def _choices(self, li: int) -> tuple[int, ...]:
        if self.layer_choices is not None:
            return self.layer_choices[li]
        return tuple(range(len(self.palette)))

    def slots_per_layer(self) -> int:
        if self.approach == "FLAM":
            return self.group_count
        if self.approach == "KLAM":
            return self.cycle_length
        return 1

    def layer_option_count(self, li: int) -> int:
        return len(self._choices(li)) ** self.slots_per_layer()

    def layer_option(self, li: int, idx: int) -> LayerAssignment:
        choices = self._choices(li)
        slots = self.slots_per_layer()
        digits = []
        for _ in range(slots):
            digits.append(choices[idx % len(choices)])
            idx //= len(choices)
        digits.reverse()
        if self.approach in ("LLAM", "KLMS"):
            return LayerAssignment(index=digits[0])
        if self.approach == "FLAM":
            return LayerAssignment(group_count=self.group_count,
                                   indices=tuple(digits))
        return LayerAssignment(indices=tuple(digits))

    @property
    def genome_radix(self) -> tuple[int, ...]:
        radix = [self.layer_option_count(li) for li in range(self.n_layers)]
        if len(self.klms_options) > 1:
            radix.append(len(self.klms_options))
        return tuple(radix)

    def size(self) -> int:
        n = 1
        for r in self.genome_radix:
            n *= r
        return n

    def plan_from_genome(self, genome: tuple[int, ...]) -> ApproxPlan:
        per_layer = tuple(
            self.layer_option(li, genome[li]) for li in range(self.n_layers)
        )
        if len(self.klms_options) > 1:
            k = self.klms_options[genome[-1]]
        else:
            k = self.klms_options[0]
        return ApproxPlan(
            approach=self.approach,
            flavor=self.flavor,
            palette=self.palette,
            per_layer=per_layer,
            klms_k=k,
        )

    def uniform_genome(self, palette_idx: int) -> tuple[int, ...]:
        """The genome assigning one palette entry everywhere."""
        choices = self._choices(0)
        genome = []
        for li in range(self.n_layers):
            ch = self._choices(li)
            pos = ch.index(palette_idx) if palette_idx in ch else 0
            idx = 0
            for _ in range(self.slots_per_layer()):
                idx = idx * len(ch) + pos
            genome.append(idx)
        if len(self.klms_options) > 1:
            genome.append(0)
        return tuple(genome)


def space_from_json(doc: dict) -> SearchSpace:
    if not isinstance(doc, dict):
        raise SpaceError("space description must be a JSON object")
    allowed = {"approach", "flavor", "palette", "layers", "group_count",
               "cycle_length", "klms", "choices"}
    extra = doc.keys() - allowed
    if extra:
        raise SpaceError(f"unknown space field(s) {sorted(extra)}")
    for key in ("approach", "palette", "layers"):
        if key not in doc:
            raise SpaceError(f"space is missing field {key!r}")
    palette = tuple(doc["palette"])
    for mid in palette:
        mx.resolve_multiplier_id(mid)
    n_layers = int(doc["layers"])
    layer_choices = None
    if "choices" in doc:
        layer_choices = tuple(
            tuple(doc["choices"].get(str(li), range(len(palette))))
            for li in range(n_layers)
        )
    klms = doc.get("klms")
    klms_options = (None,) if klms is None else tuple(
        None if v is None else float(v) for v in klms)
    try:
        return SearchSpace(
            approach=doc["approach"],
            palette=palette,
            n_layers=n_layers,
            flavor=doc.get("flavor"),
            group_count=int(doc.get("group_count", 2)),
            cycle_length=int(doc.get("cycle_length", 2)),
            klms_options=klms_options,
            layer_choices=layer_choices,
        )
    except PlanError as e:
        raise SpaceError(str(e))


def load_space(path: str | Path) -> SearchSpace:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise SpaceError(f"{path}: not valid JSON ({e})")
    return space_from_json(doc)


def enumerate_space(space: SearchSpace, cap: int | None = DEFAULT_SPACE_CAP):
    """Lazy, duplicate-free, deterministic stream of every plan."""
    size = space.size()
    if cap is not None and size > cap:
        raise CapacityError(
            f"space holds {size} plans, above the exhaustive cap of {cap}; "
            "use NSGA-II mode"
        )
    ranges = [range(r) for r in space.genome_radix]
    for genome in itertools.product(*ranges):
        yield space.plan_from_genome(genome)


# --- NSGA-II ---


def fast_nondominated_sort(objs: list[tuple[float, float]]) -> list[int]:
    """Rank (front index, 0 = best) of every point."""
    n = len(objs)
    dominated_by = [0] * n
    dominates_set: list[list[int]] = [[] for _ in range(n)]
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            if dominates(objs[i], objs[j]):
                dominates_set[i].append(j)
            elif dominates(objs[j], objs[i]):
                dominated_by[i] += 1
    ranks = [0] * n
    current = [i for i in range(n) if dominated_by[i] == 0]
    rank = 0
    while current:
        nxt = []
        for i in current:
            ranks[i] = rank
            for j in dominates_set[i]:
                dominated_by[j] -= 1
                if dominated_by[j] == 0:
                    nxt.append(j)
        current = nxt
        rank += 1
    return ranks


def crowding_distance(objs: list[tuple[float, float]],
                      members: list[int]) -> dict[int, float]:
    """Crowding inside one front; boundary points get infinity."""
    dist = {i: 0.0 for i in members}
    for axis in range(2):
        ordered = sorted(members, key=lambda i: objs[i][axis])
        dist[ordered[0]] = dist[ordered[-1]] = float("inf")
        lo = objs[ordered[0]][axis]
        hi = objs[ordered[-1]][axis]
        span = hi - lo
        if span == 0:
            continue
        for a, b, c in zip(ordered, ordered[1:], ordered[2:]):
            dist[b] += (objs[c][axis] - objs[a][axis]) / span
    return dist


@dataclass
class Nsga2Result:
    front: list[EvalRecord]
    archive: list[EvalRecord]
    evaluations: int


def nsga2(
    space: SearchSpace,
    evaluator: Evaluator,
    population: int = 32,
    generations: int = 50,
    seed: int = 0,
    crossover_rate: float = 0.9,
) -> Nsga2Result:
    """Standard elitist NSGA-II over the per-layer genome.

    Fully deterministic for a fixed seed: every random draw comes from a
    generator keyed by (seed, generation, slot), so results do not
    depend on evaluation scheduling.  The archive keeps every evaluated
    plan; the returned front is the non-dominated subset of the archive.
    """
    if population < 4 or population % 2:
        raise SpaceError("population must be even and at least 4")
    radix = space.genome_radix
    n_genes = len(radix)

    def random_genome(rng) -> tuple[int, ...]:
        return tuple(int(rng.integers(0, r)) for r in radix)

    archive: dict[tuple[int, ...], EvalRecord] = {}

    def eval_genomes(genomes: list[tuple[int, ...]]) -> list[EvalRecord]:
        plans = [space.plan_from_genome(g) for g in genomes]
        records = evaluator.evaluate_many(plans)
        for g, rec in zip(genomes, records):
            archive.setdefault(g, rec)
        return records

    # Seed the population with every uniform plan, then random genomes.
    pop: list[tuple[int, ...]] = []
    seen = set()
    for pi in range(min(len(space.palette), population)):
        g = space.uniform_genome(pi)
        if g not in seen:
            pop.append(g)
            seen.add(g)
    slot = 0
    while len(pop) < population:
        rng = np.random.default_rng([seed, 0, slot])
        g = random_genome(rng)
        slot += 1
        if g not in seen or slot > 50 * population:
            pop.append(g)
            seen.add(g)
    records = eval_genomes(pop)
    objs = [r.objectives for r in records]

    for gen in range(1, generations + 1):
        ranks = fast_nondominated_sort(objs)
        fronts: dict[int, list[int]] = {}
        for i, r in enumerate(ranks):
            fronts.setdefault(r, []).append(i)
        crowd: dict[int, float] = {}
        for members in fronts.values():
            crowd.update(crowding_distance(objs, members))

        def better(i: int, j: int) -> int:
            if ranks[i] != ranks[j]:
                return i if ranks[i] < ranks[j] else j
            return i if crowd[i] >= crowd[j] else j

        offspring: list[tuple[int, ...]] = []
        for s in range(population):
            rng = np.random.default_rng([seed, gen, s])
            p1 = better(int(rng.integers(population)), int(rng.integers(population)))
            p2 = better(int(rng.integers(population)), int(rng.integers(population)))
            g1, g2 = pop[p1], pop[p2]
            if rng.random() < crossover_rate:
                mask = rng.random(n_genes) < 0.5
                child = tuple(g1[k] if mask[k] else g2[k] for k in range(n_genes))
            else:
                child = g1
            child = list(child)
            # Mutation: resample one assignment.  Re-mutate (bounded) when
            # the child was already evaluated; duplicates teach nothing.
            k = int(rng.integers(n_genes))
            child[k] = int(rng.integers(radix[k]))
            tries = 0
            while tuple(child) in archive and tries < 10:
                k = int(rng.integers(n_genes))
                child[k] = int(rng.integers(radix[k]))
                tries += 1
            offspring.append(tuple(child))

        off_records = eval_genomes(offspring)
        comb = pop + offspring
        comb_objs = objs + [r.objectives for r in off_records]
        comb_ranks = fast_nondominated_sort(comb_objs)
        comb_fronts: dict[int, list[int]] = {}
        for i, r in enumerate(comb_ranks):
            comb_fronts.setdefault(r, []).append(i)
        next_idx: list[int] = []
        for rank in sorted(comb_fronts):
            members = comb_fronts[rank]
            if len(next_idx) + len(members) <= population:
                next_idx.extend(members)
            else:
                dist = crowding_distance(comb_objs, members)
                members = sorted(members, key=lambda i: (-dist[i], i))
                next_idx.extend(members[: population - len(next_idx)])
                break
        pop = [comb[i] for i in next_idx]
        objs = [comb_objs[i] for i in next_idx]

    all_records = list(archive.values())
    return Nsga2Result(
        front=pareto_filter(all_records),
        archive=all_records,
        evaluations=len(archive),
    )


def exhaustive_search(space: SearchSpace, evaluator: Evaluator,
                      cap: int | None = DEFAULT_SPACE_CAP) -> Nsga2Result:
    plans = list(enumerate_space(space, cap))
    records = evaluator.evaluate_many(plans)
    return Nsga2Result(front=pareto_filter(records), archive=records,
                       evaluations=len(records))
