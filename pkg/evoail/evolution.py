"""Evolutionary search over reward assignment functions.

A population starts from the classical RA functions. Every generation
samples parent pairs, asks a chat model for crossovers (falling back to
local tree mutations), scores each offspring by training with it on several
seeds, and keeps the top K of parents and offspring together.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path
from typing import Any
from typing import Dict
from typing import Iterator
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np

from ._types import ChatClient
from ._types import GenerationSummary
from ._types import Message
from .ail import AILConfig
from .ail import policy_wasserstein
from .ail import run_fail
from .envs import DemoSet
from .envs import UniformPolicy
from .exceptions import LLMEndpointError
from .exceptions import PopulationTooSmallError
from .exceptions import RAError
from .llm import extract_code_block
from .llm import render_prompt
from .models import EvoConfig
from .processing import EvaluationPool
from .processing import EventLike
from .ra import BASE_POPULATION
from .ra import BINARY_OPS
from .ra import BUILTIN_SOURCES
from .ra import UNARY_OPS
from .ra import Binary
from .ra import Branch
from .ra import Const
from .ra import RAExpr
from .ra import RAFunction
from .ra import Unary
from .ra import check_limits
from .ra import iter_nodes
from .ra import named_ra
from .ra import node_count
from .ra import parse
from .ra import replace_node
from .ra import serialize
from .ra import validate
from .state import JobState
from .state import RunState
from .utils import sha256_hex
from .utils import write_jsonl

LOCAL_OPERATORS = ("subtree_swap", "node_mutation", "constant_perturb", "affine_wrap")
LOCAL_ATTEMPTS = 10
AFFINE_SCALES = (0.5, 1.0, 2.0)
AFFINE_SHIFTS = (-0.5, 0.0, 0.5)


@dataclass
class Candidate:
    ra: RAFunction
    generation: int = 0
    source: str = "base"
    """One of 'base', 'llm' or 'local'."""
    parents: Tuple[str, ...] = ()
    id: str = ""
    scores: List[float] = field(default_factory=list)
    fitness: Optional[float] = None
    jobs: List[JobState] = field(default_factory=list)
    prompt_hash: Optional[str] = None
    response_hash: Optional[str] = None
    prompt: Optional[str] = None
    response: Optional[str] = None

    @property
    def dsl(self) -> str:
        return self.ra.dsl

    @property
    def evaluated(self) -> bool:
        return self.fitness is not None

    @property
    def node_count(self) -> int:
        return node_count(self.ra.expr)

    def sort_key(self) -> Tuple[float, int, str]:
        fitness = -math.inf if self.fitness is None else self.fitness
        return (-fitness, self.node_count, self.dsl)

    def record(self) -> Dict[str, Any]:
        return {
            "kind": "candidate",
            "id": self.id,
            "generation": self.generation,
            "parents": list(self.parents),
            "source": self.source,
            "dsl": self.dsl,
            "scores": self.scores,
            "fitness": self.fitness,
            "prompt_hash": self.prompt_hash,
            "response_hash": self.response_hash,
            "errors": [
                {"seed": job.seed, "error_type": job.error_type, "error": job.error}
                for job in self.jobs
                if not job.ok
            ],
        }


@dataclass
class Population:
    members: List[Candidate]
    capacity: int

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self) -> Iterator[Candidate]:
        return iter(self.members)

    @property
    def best(self) -> Candidate:
        if not self.members:
            raise PopulationTooSmallError("Population is empty")
        return min(self.members, key=Candidate.sort_key)


@dataclass
class PromptBundle:
    messages: List[Message]
    parents: Tuple[str, str]
    scores: Tuple[float, float]

    @classmethod
    def for_pair(cls, pair: Tuple[Candidate, Candidate]) -> PromptBundle:
        parents = (pair[0].dsl, pair[1].dsl)
        scores = tuple(c.fitness if c.fitness is not None else math.nan for c in pair)
        return cls(
            messages=render_prompt(list(zip(parents, scores))),
            parents=parents,
            scores=scores,
        )

    @property
    def text(self) -> str:
        return "\n\n".join(m["content"] for m in self.messages)

    @property
    def digest(self) -> str:
        return sha256_hex(self.text)


EXCHANGE_OUTCOMES = (
    "accepted",
    "no_code_block",
    "parse_error",
    "invalid",
    "duplicate",
    "endpoint_error",
)


@dataclass
class Exchange:
    """One crossover request and what became of its response.

    `response` is None when the endpoint failed. `candidate` is set only for
    accepted responses.
    """

    parents: Tuple[str, str]
    prompt: str
    response: Optional[str]
    outcome: str
    reason: str = ""
    generation: int = 0
    candidate: Optional[Candidate] = None

    def __post_init__(self) -> None:
        if self.outcome not in EXCHANGE_OUTCOMES:
            raise ValueError(f"Unknown exchange outcome {self.outcome!r}")

    @property
    def accepted(self) -> bool:
        return self.outcome == "accepted"

    def record(self) -> Dict[str, Any]:
        """Ledger line; prompt and response appear as hashes only."""
        return {
            "kind": "exchange",
            "generation": self.generation,
            "parents": list(self.parents),
            "outcome": self.outcome,
            "reason": self.reason,
            "candidate_id": self.candidate.id if self.candidate is not None else None,
            "prompt_hash": sha256_hex(self.prompt),
            "response_hash": None if self.response is None else sha256_hex(self.response),
        }


@dataclass
class EvolutionResult:
    best: Candidate
    population: Population
    history: List[Candidate]
    generations: List[GenerationSummary]
    state: RunState
    random_wasserstein: float
    exchanges: List[Exchange] = field(default_factory=list)

    @property
    def rejected(self) -> List[Exchange]:
        return [e for e in self.exchanges if not e.accepted]

    @property
    def normalized_best(self) -> Optional[float]:
        """Best W2 relative to the best base member's W2."""
        base = [c for c in self.history if c.source == "base" and c.evaluated]
        if not base or not self.best.evaluated:
            return None
        base_w2 = -max(c.fitness for c in base)
        if base_w2 <= 0:
            return None
        return -self.best.fitness / base_w2

    def summary(self) -> Dict[str, Any]:
        return {
            "kind": "summary",
            "best_id": self.best.id,
            "best_dsl": self.best.dsl,
            "best_fitness": self.best.fitness,
            "normalized_best_w2": self.normalized_best,
            "random_policy_w2": self.random_wasserstein,
            "generations": list(self.generations),
            "state": self.state.asdict(),
        }


def base_population(capacity: Optional[int] = None) -> Population:
    members = [
        Candidate(ra=named_ra(name), generation=0, source="base", id=f"g0-{name}")
        for name in BASE_POPULATION
    ]
    return Population(members, capacity or len(members))


def sample_pairs(
    pop: Population, m: int, rng: np.random.Generator
) -> List[Tuple[Candidate, Candidate]]:
    """`m` pairs of distinct members; pairs may repeat across draws."""
    if len(pop) < 2:
        raise PopulationTooSmallError(
            f"Need at least 2 candidates to sample pairs, got {len(pop)}"
        )
    pairs = []
    for _ in range(m):
        i, j = rng.choice(len(pop), size=2, replace=False)
        pairs.append((pop.members[i], pop.members[j]))
    return pairs


def _accept(expr: RAExpr) -> Optional[str]:
    """None if `expr` passes validation, else the reason it doesn't."""
    try:
        check_limits(expr)
    except RAError as e:
        return str(e)
    report = validate(expr)
    if not report.ok:
        return "; ".join(report.problems)
    return None


def _builtin_dsl() -> Dict[str, str]:
    return {serialize(named_ra(name).expr): name for name in BUILTIN_SOURCES}


def crossover_llm(
    pair: Tuple[Candidate, Candidate],
    client: ChatClient,
    n: int = 1,
    temperature: Optional[float] = None,
    exchanges: Optional[List[Exchange]] = None,
) -> List[Candidate]:
    """Up to `n` offspring proposed by the chat model.

    Responses without a code block, unparsable or invalid expressions and
    exact copies of a parent or a builtin are rejected. Endpoint failures
    yield no candidates. Every request, accepted or not, is appended to
    `exchanges` when given.
    """
    bundle = PromptBundle.for_pair(pair)
    parent_ids = (pair[0].id, pair[1].id)
    prompt = bundle.text
    known = _builtin_dsl()
    for parent in pair:
        known[parent.dsl] = parent.id
    children: List[Candidate] = []

    def note(
        response: Optional[str],
        outcome: str,
        reason: str = "",
        candidate: Optional[Candidate] = None,
    ) -> None:
        if exchanges is not None:
            exchanges.append(
                Exchange(parent_ids, prompt, response, outcome, reason, candidate=candidate)
            )

    for _ in range(n):
        try:
            response = client.complete(bundle.messages, temperature)
        except LLMEndpointError as e:
            logging.warning("No crossover for %s x %s: %s", pair[0].id, pair[1].id, e)
            note(None, "endpoint_error", str(e))
            break
        code = extract_code_block(response)
        if code is None:
            logging.info("Rejected response without a code block: %.200r", response)
            note(response, "no_code_block")
            continue
        try:
            expr = parse(code)
        except RAError as e:
            logging.info("Rejected unparsable candidate %r: %s", code, e)
            note(response, "parse_error", str(e))
            continue
        problem = _accept(expr)
        if problem is not None:
            logging.info("Rejected invalid candidate %r: %s", code, problem)
            note(response, "invalid", problem)
            continue
        dsl = serialize(expr)
        if dsl in known:
            logging.info("Rejected candidate %r: duplicate of %s", dsl, known[dsl])
            note(response, "duplicate", f"duplicate of {known[dsl]}")
            continue
        known[dsl] = "an earlier response"
        child = Candidate(
            ra=RAFunction(name=dsl, expr=expr, source="llm"),
            source="llm",
            parents=parent_ids,
            prompt_hash=bundle.digest,
            response_hash=sha256_hex(response),
            prompt=prompt,
            response=response,
        )
        note(response, "accepted", candidate=child)
        children.append(child)
    return children


def _subtree_swap(
    a: RAExpr, b: RAExpr, rng: np.random.Generator, at_root: bool
) -> Optional[RAExpr]:
    if at_root:
        return b
    i = int(rng.integers(node_count(a)))
    donor = list(iter_nodes(b))[int(rng.integers(node_count(b)))]
    return replace_node(a, i, donor)


def _node_mutation(a: RAExpr, rng: np.random.Generator) -> Optional[RAExpr]:
    internal = [
        (i, node)
        for i, node in enumerate(iter_nodes(a))
        if isinstance(node, (Unary, Binary))
    ]
    if not internal:
        return None
    i, node = internal[int(rng.integers(len(internal)))]
    if isinstance(node, Unary):
        ops = [op for op in UNARY_OPS if op != node.op]
        return replace_node(a, i, Unary(ops[int(rng.integers(len(ops)))], node.child))
    ops = [op for op in BINARY_OPS if op != node.op]
    return replace_node(
        a, i, Binary(ops[int(rng.integers(len(ops)))], node.left, node.right)
    )


def _perturb(value: float, rng: np.random.Generator) -> float:
    if rng.random() < 0.5:
        return value * float(rng.uniform(0.5, 2.0))
    return value + float(rng.normal(0.0, 0.25))


def _constant_perturb(a: RAExpr, rng: np.random.Generator) -> Optional[RAExpr]:
    numeric = [
        (i, node)
        for i, node in enumerate(iter_nodes(a))
        if isinstance(node, (Const, Branch))
    ]
    if not numeric:
        return None
    i, node = numeric[int(rng.integers(len(numeric)))]
    if isinstance(node, Const):
        return replace_node(a, i, Const(_perturb(node.value, rng)))
    return replace_node(a, i, Branch(_perturb(node.threshold, rng), node.if_le, node.if_gt))


def _affine_wrap(a: RAExpr, rng: np.random.Generator) -> RAExpr:
    combos = [(s, t) for s in AFFINE_SCALES for t in AFFINE_SHIFTS if (s, t) != (1.0, 0.0)]
    scale, shift = combos[int(rng.integers(len(combos)))]
    return Binary("add", Binary("mul", Const(scale), a), Const(shift))


def crossover_local(
    pair: Tuple[Candidate, Candidate],
    rng: np.random.Generator,
    operator: Optional[str] = None,
    at_root: bool = False,
) -> Candidate:
    """One offspring from a random tree operator, resampled until valid.

    `operator` forces one of LOCAL_OPERATORS; `at_root` makes a subtree swap
    replace the whole first parent. After LOCAL_ATTEMPTS invalid samples a
    copy of the fitter parent is returned.
    """
    if operator is not None and operator not in LOCAL_OPERATORS:
        raise ValueError(f"Unknown operator {operator!r}, expected one of {LOCAL_OPERATORS}")
    parent_ids = (pair[0].id, pair[1].id)
    for _ in range(LOCAL_ATTEMPTS):
        op = operator or LOCAL_OPERATORS[int(rng.integers(len(LOCAL_OPERATORS)))]
        first = int(rng.integers(2))
        a, b = pair[first].ra.expr, pair[1 - first].ra.expr
        if op == "subtree_swap":
            expr = _subtree_swap(a, b, rng, at_root)
        elif op == "node_mutation":
            expr = _node_mutation(a, rng)
        elif op == "constant_perturb":
            expr = _constant_perturb(a, rng)
        else:
            expr = _affine_wrap(a, rng)
        if expr is None:
            continue
        problem = _accept(expr)
        if problem is None:
            dsl = serialize(expr)
            return Candidate(
                ra=RAFunction(name=dsl, expr=expr, source="local_mutation"),
                source="local",
                parents=parent_ids,
            )
        logging.debug("Local %s sample rejected: %s", op, problem)

    fitter = min(pair, key=Candidate.sort_key)
    logging.info(
        "No valid local offspring of %s x %s in %d attempts, copying %s",
        parent_ids[0],
        parent_ids[1],
        LOCAL_ATTEMPTS,
        fitter.id,
    )
    return Candidate(
        ra=RAFunction(name=fitter.dsl, expr=fitter.ra.expr, source="local_mutation"),
        source="local",
        parents=parent_ids,
    )


@dataclass
class EvalJob:
    candidate_id: str
    ra: RAFunction
    cfg: AILConfig
    demos: DemoSet
    seed: int


def run_job(job: EvalJob) -> JobState:
    """Trains with the job's RA function. Never raises."""
    state = JobState(candidate_id=job.candidate_id, seed=job.seed)
    state.start()
    try:
        result = run_fail(dataclasses.replace(job.cfg, ra=job.ra), job.demos, job.seed)
        state.set_ok(-result.wasserstein, result.eval_return)
    except Exception as e:
        logging.error(
            "Run of %s with seed %d aborted: %s: %s",
            job.candidate_id,
            job.seed,
            type(e).__name__,
            e,
        )
        state.set_error(e)
    return state


def evaluation_seeds(seed: int, n: int) -> List[int]:
    """Seeds shared by every candidate, so fitness comparisons are paired."""
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


def evaluate(
    cands: Sequence[Candidate],
    demos: DemoSet,
    ail_cfg: AILConfig,
    seeds: Sequence[int],
    worst_fitness: float,
    pool: Optional[EvaluationPool] = None,
) -> List[Candidate]:
    """Fitness = mean over seeds of -W2; aborted runs score `worst_fitness`.

    Candidates whose jobs did not all finish (the pool was stopped) stay
    unevaluated.
    """
    pool = pool or EvaluationPool()
    jobs = [
        EvalJob(candidate_id=c.id, ra=c.ra, cfg=ail_cfg, demos=demos, seed=s)
        for c in cands
        for s in seeds
    ]
    results = pool.map(run_job, jobs)
    for k, cand in enumerate(cands):
        states = results[k * len(seeds) : (k + 1) * len(seeds)]
        if len(states) < len(seeds):
            continue
        cand.jobs = list(states)
        cand.scores = [s.fitness if s.ok else worst_fitness for s in states]
        cand.fitness = float(np.mean(cand.scores))
        logging.info(
            "Candidate %s fitness %.6f (%d/%d runs ok): %s",
            cand.id,
            cand.fitness,
            sum(s.ok for s in states),
            len(states),
            cand.dsl,
        )
    return list(cands)


def select_topk(pop: Population, offspring: Sequence[Candidate], k: int) -> Population:
    """Top `k` of parents and offspring together.

    Ties go to the smaller expression, then to the smaller serialization.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    union = list(pop.members) + list(offspring)
    unevaluated = [c.id for c in union if not c.evaluated]
    if unevaluated:
        raise ValueError(f"Cannot select unevaluated candidates: {', '.join(unevaluated)}")
    return Population(sorted(union, key=Candidate.sort_key)[:k], k)


def _generation_summary(generation: int, pop: Population, n_evaluated: int) -> GenerationSummary:
    best = pop.best
    return GenerationSummary(
        generation=generation,
        best_id=best.id,
        best_fitness=best.fitness,
        best_dsl=best.dsl,
        n_evaluated=n_evaluated,
    )


def write_ledger(path: Union[str, Path], result: EvolutionResult) -> None:
    lines = [json.dumps(c.record()) for c in result.history]
    lines.extend(json.dumps(e.record()) for e in result.exchanges)
    lines.append(json.dumps(result.summary()))
    write_jsonl(path, lines)
    logging.info("Wrote %d candidates to %s", len(result.history), path)


def run_evolution(
    cfg: EvoConfig,
    ail_cfg: AILConfig,
    demos: DemoSet,
    client: Optional[ChatClient] = None,
    seed: int = 0,
    workers: int = 1,
    stop_event: Optional[EventLike] = None,
    ledger: Optional[Union[str, Path]] = None,
    temperature: Optional[float] = None,
) -> EvolutionResult:
    """Search for the RA function whose trained policies best match `demos`.

    Without a client (or with `local_only`) all offspring come from local
    mutation. The ledger, when given, is written even if the run is stopped
    early.
    """
    pool = EvaluationPool(workers, stop_event)
    search_seed, eval_seed, baseline_seed = np.random.SeedSequence(seed).spawn(3)
    rng = np.random.default_rng(search_seed)
    seeds = evaluation_seeds(int(eval_seed.generate_state(1)[0]), cfg.eval_seeds)
    state = RunState()
    use_llm = client is not None and not cfg.local_only

    random_w2, _ = policy_wasserstein(
        ail_cfg.env,
        UniformPolicy(ail_cfg.env.n_actions),
        demos,
        np.random.default_rng(baseline_seed),
        episodes=ail_cfg.eval_episodes,
        max_points=ail_cfg.max_eval_points,
        fixed_length=ail_cfg.fixed_length,
        ot_settings=ail_cfg.ot,
    )
    worst = -cfg.worst_fitness_factor * (random_w2 if random_w2 > 0 else 1.0)
    logging.info("Random policy W2 %.6f, failed runs score %.6f", random_w2, worst)

    base = base_population()
    evaluate(base.members, demos, ail_cfg, seeds, worst, pool)
    history: List[Candidate] = list(base.members)
    for cand in base:
        if cand.evaluated:
            state.update_best(cand.fitness)
        for job in cand.jobs:
            state.record(job)

    generations: List[GenerationSummary] = []
    exchanges: List[Exchange] = []
    if pool.stopped or not all(c.evaluated for c in base):
        state.stopped = True
        pop = Population([c for c in base if c.evaluated], cfg.topk)
        if not pop.members:
            raise PopulationTooSmallError("Stopped before the base population was evaluated")
    else:
        pop = select_topk(Population([], cfg.topk), base.members, cfg.topk)
        generations.append(_generation_summary(0, pop, len(base)))

    for g in range(1, cfg.generations + 1):
        if pool.stopped:
            state.stopped = True
            break
        state.generation = g
        offspring: List[Candidate] = []
        pending: List[Exchange] = []
        for pair in sample_pairs(pop, cfg.pairs, rng):
            children: List[Candidate] = []
            if use_llm:
                children = crossover_llm(
                    pair, client, cfg.candidates_per_pair, temperature, pending
                )
                if not children:
                    state.llm_failures += 1
            if not children and (not use_llm or cfg.fallback):
                if use_llm:
                    state.fallbacks += 1
                children = [crossover_local(pair, rng) for _ in range(cfg.candidates_per_pair)]
            offspring.extend(children)
        for k, child in enumerate(offspring):
            child.id = f"g{g}-{k:03d}"
            child.generation = g
        for exchange in pending:
            exchange.generation = g
        exchanges.extend(pending)

        evaluate(offspring, demos, ail_cfg, seeds, worst, pool)
        history.extend(offspring)
        for cand in offspring:
            for job in cand.jobs:
                state.record(job)
        finished = [c for c in offspring if c.evaluated]
        pop = select_topk(pop, finished, cfg.topk)
        state.update_best(pop.best.fitness)
        generations.append(_generation_summary(g, pop, len(finished)))
        logging.info(
            "Generation %d/%d: %d offspring, best %s fitness %.6f",
            g,
            cfg.generations,
            len(offspring),
            pop.best.id,
            pop.best.fitness,
        )

    result = EvolutionResult(
        best=pop.best,
        population=pop,
        history=history,
        generations=generations,
        state=state,
        random_wasserstein=random_w2,
        exchanges=exchanges,
    )
    if ledger is not None:
        write_ledger(ledger, result)
    return result
