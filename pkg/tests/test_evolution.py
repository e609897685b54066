from __future__ import annotations

import dataclasses
import json
import os
import threading
from pathlib import Path
from typing import List
from typing import Optional

import numpy as np
import pytest

from evoail import envs
from evoail import evolution as evo
from evoail import models
from evoail._types import Message
from evoail.ail import AILConfig
from evoail.evolution import Candidate
from evoail.evolution import Exchange
from evoail.evolution import Population
from evoail.exceptions import LLMEndpointError
from evoail.exceptions import PopulationTooSmallError
from evoail.llm import MockChatClient
from evoail.models import EvoConfig
from evoail.ra import RAFunction
from evoail.ra import named_ra
from evoail.ra import parse
from evoail.ra import serialize
from evoail.ra import validate


def _candidate(text: str, fitness: Optional[float] = None, id: str = "") -> Candidate:
    expr = parse(text)
    return Candidate(
        ra=RAFunction(name=serialize(expr), expr=expr, source="user"),
        fitness=fitness,
        id=id or serialize(expr),
    )


class FailingClient:
    def complete(self, messages: List[Message], temperature: Optional[float] = None) -> str:
        raise LLMEndpointError("endpoint is down")


class StoppingClient(MockChatClient):
    """Sets `event` on the first request."""

    def __init__(self, responses: List[str], event: threading.Event) -> None:
        super().__init__(responses)
        self.event = event

    def complete(self, messages: List[Message], temperature: Optional[float] = None) -> str:
        self.event.set()
        return super().complete(messages, temperature)


@pytest.fixture
def evo_ail_config(tiny_ail_config: AILConfig) -> AILConfig:
    return dataclasses.replace(tiny_ail_config, iterations=1)


@pytest.fixture
def tiny_evo_config() -> EvoConfig:
    return EvoConfig(generations=2, pairs=2, topk=4, eval_seeds=1)


def test_base_population():
    pop = evo.base_population()
    assert [c.id for c in pop] == ["g0-gail", "g0-fairl", "g0-airl", "g0-gail_heuristic"]
    assert pop.capacity == 4
    assert all(c.source == "base" and c.generation == 0 for c in pop)
    assert not any(c.evaluated for c in pop)


def test_sample_pairs():
    pop = evo.base_population()
    rng = np.random.default_rng(0)
    pairs = evo.sample_pairs(pop, 50, rng)
    assert len(pairs) == 50
    assert all(a.id != b.id for a, b in pairs)
    again = evo.sample_pairs(pop, 50, np.random.default_rng(0))
    assert [(a.id, b.id) for a, b in pairs] == [(a.id, b.id) for a, b in again]


def test_sample_pairs_population_too_small():
    with pytest.raises(PopulationTooSmallError):
        evo.sample_pairs(Population([_candidate("x")], 1), 1, np.random.default_rng(0))


def test_population_best():
    pop = Population([_candidate("x", -2.0), _candidate("tanh(x)", -1.0)], 2)
    assert pop.best.dsl == "tanh(x)"
    with pytest.raises(PopulationTooSmallError):
        _ = Population([], 1).best


def test_crossover_llm_from_file(llm_responses_file: Path):
    client = MockChatClient.from_file(llm_responses_file)
    pop = evo.base_population()
    pair = (pop.members[0], pop.members[1])
    children = evo.crossover_llm(pair, client, n=5)
    # No block, malformed and builtin copy are rejected
    assert [c.dsl for c in children] == [
        "(sigmoid((2 * x)) * tanh(softplus(x)))",
        "((0.5 * min(max(x, -1), 1)) + 0.5)",
    ]
    assert len(client.calls) == 5
    for child in children:
        assert child.source == "llm"
        assert child.ra.source == "llm"
        assert child.parents == ("g0-gail", "g0-fairl")
        assert child.prompt_hash is not None and len(child.prompt_hash) == 64
        assert child.response_hash is not None
    assert children[0].response_hash != children[1].response_hash


def test_crossover_llm_prompt_contains_parents():
    client = MockChatClient(["no code here"])
    pop = evo.base_population()
    pop.members[0].fitness = -0.25
    evo.crossover_llm((pop.members[0], pop.members[2]), client, n=1)
    (messages,) = client.calls
    assert messages[0]["role"] == "system"
    assert "softplus(x)" in messages[1]["content"]
    assert "Score: -0.25" in messages[1]["content"]
    assert "Score: nan" in messages[1]["content"]


def test_crossover_llm_rejects_parent_copy():
    pair = (_candidate("tanh(x)", id="a"), _candidate("x * 2", id="b"))
    client = MockChatClient(["```\n(x * 2)\n```", "```\ntanh(x)\n```"])
    assert evo.crossover_llm(pair, client, n=2) == []


def test_crossover_llm_rejects_duplicate_responses():
    pair = (_candidate("tanh(x)", id="a"), _candidate("x * 2", id="b"))
    client = MockChatClient(["```\nsigmoid(3 * x)\n```"])
    children = evo.crossover_llm(pair, client, n=3)
    assert len(children) == 1


def test_crossover_llm_rejects_invalid():
    pair = (_candidate("tanh(x)", id="a"), _candidate("x * 2", id="b"))
    client = MockChatClient(["```\nexp(exp(x))\n```"])
    assert evo.crossover_llm(pair, client, n=1) == []


def test_crossover_llm_endpoint_error(caplog: pytest.LogCaptureFixture):
    pop = evo.base_population()
    assert evo.crossover_llm((pop.members[0], pop.members[1]), FailingClient(), n=3) == []
    assert "endpoint is down" in caplog.text


def test_crossover_llm_records_exchanges(llm_responses_file: Path):
    client = MockChatClient.from_file(llm_responses_file)
    pop = evo.base_population()
    exchanges: List[Exchange] = []
    children = evo.crossover_llm((pop.members[0], pop.members[1]), client, n=5, exchanges=exchanges)
    assert [e.outcome for e in exchanges] == [
        "accepted",
        "no_code_block",
        "parse_error",
        "duplicate",
        "accepted",
    ]
    assert [e.response for e in exchanges] == client.responses
    assert exchanges[3].reason == "duplicate of dail"
    assert exchanges[2].reason
    for exchange in exchanges:
        assert exchange.parents == ("g0-gail", "g0-fairl")
        assert "softplus(x)" in exchange.prompt
    assert [e.candidate for e in exchanges if e.accepted] == children
    for child in children:
        assert child.response in client.responses
        assert child.prompt == exchanges[0].prompt


def test_crossover_llm_records_endpoint_error():
    pop = evo.base_population()
    exchanges: List[Exchange] = []
    evo.crossover_llm((pop.members[0], pop.members[1]), FailingClient(), n=3, exchanges=exchanges)
    (exchange,) = exchanges
    assert exchange.outcome == "endpoint_error"
    assert exchange.response is None
    assert exchange.reason == "endpoint is down"
    assert exchange.record()["response_hash"] is None


def test_exchange_unknown_outcome():
    with pytest.raises(ValueError):
        Exchange(parents=("a", "b"), prompt="p", response="r", outcome="lost")


def test_crossover_local_at_root():
    pair = (_candidate("tanh(x)", -1.0, "a"), _candidate("sigmoid(x)", -2.0, "b"))
    rng = np.random.default_rng(0)
    for _ in range(10):
        child = evo.crossover_local(pair, rng, operator="subtree_swap", at_root=True)
        assert child.dsl in {"tanh(x)", "sigmoid(x)"}
        assert child.source == "local"
        assert child.ra.source == "local_mutation"
        assert child.parents == ("a", "b")


@pytest.mark.parametrize("operator", evo.LOCAL_OPERATORS)
def test_crossover_local_operators(operator: str):
    pair = (_candidate("0.5 * tanh(x)", -1.0, "a"), _candidate("sigmoid(x) + 1", -2.0, "b"))
    rng = np.random.default_rng(1)
    for _ in range(10):
        child = evo.crossover_local(pair, rng, operator=operator)
        report = validate(child.ra.expr)
        assert report.ok


def test_crossover_local_affine_wrap():
    pair = (_candidate("tanh(x)", -1.0, "a"), _candidate("tanh(x)", -1.0, "b"))
    child = evo.crossover_local(pair, np.random.default_rng(0), operator="affine_wrap")
    assert child.dsl.startswith("((")
    assert "tanh(x)" in child.dsl
    assert child.dsl != "tanh(x)"


def test_crossover_local_falls_back_to_fitter_parent():
    """`x` has no internal node, so node mutation never yields a sample."""
    pair = (_candidate("x", -3.0, "a"), _candidate("x", -1.0, "b"))
    child = evo.crossover_local(pair, np.random.default_rng(0), operator="node_mutation")
    assert child.dsl == "x"


def test_crossover_local_unknown_operator():
    pair = (_candidate("x", id="a"), _candidate("x", id="b"))
    with pytest.raises(ValueError):
        evo.crossover_local(pair, np.random.default_rng(0), operator="inversion")


def test_select_topk_elitism_and_ties():
    parents = Population(
        [_candidate("x", -1.0, "p1"), _candidate("tanh(x)", -3.0, "p2")], 2
    )
    offspring = [
        _candidate("sigmoid(tanh(x))", -2.0, "o1"),
        _candidate("sigmoid(x)", -2.0, "o2"),
        _candidate("abs(x)", -2.0, "o3"),
        _candidate("exp(x)", -5.0, "o4"),
    ]
    top = evo.select_topk(parents, offspring, 3)
    # Equal fitness: fewer nodes first, then the smaller serialization
    assert [c.id for c in top] == ["p1", "o3", "o2"]
    assert top.capacity == 3


def test_select_topk_invalid():
    parents = Population([_candidate("x", -1.0, "p1")], 1)
    with pytest.raises(ValueError):
        evo.select_topk(parents, [], 0)
    with pytest.raises(ValueError):
        evo.select_topk(parents, [_candidate("tanh(x)", None, "o1")], 1)


def test_evaluation_seeds():
    seeds = evo.evaluation_seeds(0, 4)
    assert len(set(seeds)) == 4
    assert seeds == evo.evaluation_seeds(0, 4)


def test_evaluate_scores_failed_runs(evo_ail_config: AILConfig, grid_demos: envs.DemoSet):
    good = _candidate("tanh(x)", id="good")
    bad = _candidate("1e200 * 1e200 * x", id="bad")
    evo.evaluate([good, bad], grid_demos, evo_ail_config, seeds=[0, 1], worst_fitness=-99.0)
    assert good.evaluated and bad.evaluated
    assert len(good.scores) == 2
    assert all(-99.0 < s <= 0.0 for s in good.scores)
    assert good.fitness == pytest.approx(np.mean(good.scores))
    assert bad.scores == [-99.0, -99.0]
    assert all(not job.ok for job in bad.jobs)
    assert bad.record()["errors"][0]["seed"] == 0


def test_run_evolution_reproducible(
    tmp_path: Path,
    evo_ail_config: AILConfig,
    grid_demos: envs.DemoSet,
    tiny_evo_config: EvoConfig,
    llm_responses_file: Path,
):
    ledgers = []
    for name in ("a.jsonl", "b.jsonl"):
        result = evo.run_evolution(
            tiny_evo_config,
            evo_ail_config,
            grid_demos,
            client=MockChatClient.from_file(llm_responses_file),
            seed=7,
            ledger=tmp_path / name,
        )
        ledgers.append((tmp_path / name).read_bytes())
    assert ledgers[0] == ledgers[1]

    best = [g["best_fitness"] for g in result.generations]
    assert [g["generation"] for g in result.generations] == [0, 1, 2]
    assert all(later >= earlier for earlier, later in zip(best, best[1:]))
    assert result.best.fitness == best[-1]
    assert result.state.best_fitness == best[-1]
    assert len(result.population) <= tiny_evo_config.topk
    assert not result.state.stopped


def test_run_evolution_ledger(
    tmp_path: Path,
    evo_ail_config: AILConfig,
    grid_demos: envs.DemoSet,
    tiny_evo_config: EvoConfig,
):
    path = tmp_path / "ledger.jsonl"
    result = evo.run_evolution(tiny_evo_config, evo_ail_config, grid_demos, seed=0, ledger=path)
    lines = [json.loads(line) for line in path.read_text().splitlines()]
    candidates, summary = lines[:-1], lines[-1]
    assert len(candidates) == len(result.history) == 4 + 2 * 2
    assert all(c["kind"] == "candidate" for c in candidates)
    assert [c["id"] for c in candidates[:4]] == [c.id for c in evo.base_population()]
    assert {c["source"] for c in candidates[4:]} == {"local"}
    assert candidates[4]["id"] == "g1-000"
    assert summary["kind"] == "summary"
    assert summary["best_id"] == result.best.id
    assert summary["random_policy_w2"] > 0.0
    assert summary["state"]["evaluated"] == 8
    assert summary["normalized_best_w2"] <= 1.0


def test_run_evolution_local_only(
    evo_ail_config: AILConfig, grid_demos: envs.DemoSet, tiny_evo_config: EvoConfig
):
    client = MockChatClient(["```\nsigmoid(3 * x)\n```"])
    cfg = tiny_evo_config.model_copy(update={"generations": 1, "local_only": True})
    result = evo.run_evolution(cfg, evo_ail_config, grid_demos, client=client, seed=0)
    assert client.calls == []
    assert {c.source for c in result.history[4:]} == {"local"}


def test_run_evolution_keeps_responses(
    tmp_path: Path,
    evo_ail_config: AILConfig,
    grid_demos: envs.DemoSet,
    tiny_evo_config: EvoConfig,
    llm_responses_file: Path,
):
    client = MockChatClient.from_file(llm_responses_file)
    cfg = tiny_evo_config.model_copy(update={"generations": 1})
    path = tmp_path / "ledger.jsonl"
    result = evo.run_evolution(cfg, evo_ail_config, grid_demos, client=client, seed=0, ledger=path)

    # One request per pair: the first response is accepted, the second has no block
    assert [e.response for e in result.exchanges] == client.responses[:2]
    assert [e.outcome for e in result.exchanges] == ["accepted", "no_code_block"]
    assert all(e.generation == 1 for e in result.exchanges)
    (rejected,) = result.rejected
    assert "softplus(x) + 1" in rejected.response
    assert rejected.prompt

    llm_child = result.exchanges[0].candidate
    assert llm_child in result.history
    assert llm_child.id == "g1-000"
    assert llm_child.response == client.responses[0]
    assert result.history[-1].source == "local"

    lines = [json.loads(line) for line in path.read_text().splitlines()]
    ledger_exchanges = [line for line in lines if line["kind"] == "exchange"]
    assert [e["outcome"] for e in ledger_exchanges] == ["accepted", "no_code_block"]
    assert ledger_exchanges[0]["candidate_id"] == "g1-000"
    assert ledger_exchanges[1]["candidate_id"] is None
    assert len(ledger_exchanges[1]["response_hash"]) == 64
    # Hashes only on disk
    assert "shifts GAIL upwards" not in path.read_text()
    assert lines[-1]["kind"] == "summary"


def test_run_evolution_llm_fallback(
    evo_ail_config: AILConfig, grid_demos: envs.DemoSet, tiny_evo_config: EvoConfig
):
    client = MockChatClient(["no code block"])
    cfg = tiny_evo_config.model_copy(update={"generations": 1})
    result = evo.run_evolution(cfg, evo_ail_config, grid_demos, client=client, seed=0)
    assert result.state.llm_failures == cfg.pairs
    assert result.state.fallbacks == cfg.pairs
    assert len(result.history) == 4 + cfg.pairs

    no_fallback = cfg.model_copy(update={"fallback": False})
    result = evo.run_evolution(no_fallback, evo_ail_config, grid_demos, client=client, seed=0)
    assert len(result.history) == 4
    assert result.state.fallbacks == 0


def test_run_evolution_stop_event(
    tmp_path: Path,
    evo_ail_config: AILConfig,
    grid_demos: envs.DemoSet,
    tiny_evo_config: EvoConfig,
):
    event = threading.Event()
    client = StoppingClient(["```\nsigmoid(3 * x)\n```"], event)
    path = tmp_path / "ledger.jsonl"
    result = evo.run_evolution(
        tiny_evo_config,
        evo_ail_config,
        grid_demos,
        client=client,
        seed=0,
        stop_event=event,
        ledger=path,
    )
    assert result.state.stopped
    assert result.state.generation == 1
    # Generation 1 offspring were proposed but never evaluated
    assert not any(c.evaluated for c in result.history[4:])
    assert all(c.evaluated for c in result.population)
    assert path.exists()


def test_run_evolution_stopped_before_base(
    evo_ail_config: AILConfig, grid_demos: envs.DemoSet, tiny_evo_config: EvoConfig
):
    event = threading.Event()
    event.set()
    with pytest.raises(PopulationTooSmallError):
        evo.run_evolution(tiny_evo_config, evo_ail_config, grid_demos, stop_event=event)


@pytest.mark.slow
def test_desk_evolution_improves_on_base(tmp_path: Path):
    config = models.load_config(
        preset="desk", overrides={"env": {"id": "grid7"}, "evolution": {"local_only": True}}
    )
    ail_cfg = AILConfig.from_run_config(config, ra=named_ra("gail"))
    expert = envs.value_iteration_expert(ail_cfg.env)
    demos = envs.collect_demos(ail_cfg.env, expert.policy, n_demos=10, stride=20, seed=0)
    result = evo.run_evolution(
        config.evolution,
        ail_cfg,
        demos,
        seed=0,
        workers=os.cpu_count() or 1,
        ledger=tmp_path / "ledger.jsonl",
    )
    base_best = max(c.fitness for c in result.history if c.source == "base")
    assert result.best.fitness >= base_best
    assert len(result.generations) == config.evolution.generations + 1
