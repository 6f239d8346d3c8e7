"""Experiment orchestration: seeded runs, sweeps and reporting.

A JSON :class:`ExperimentConfig` names a scenario, seeds, budget, a lambda
grid and solver settings. :func:`run` executes the attack (plus requested
baselines) for every (seed, lambda) cell and returns one
:class:`RunRecord` per executed attack; any exception inside a cell
becomes a failed record instead of a crash. :func:`sweep` repeats the run
along a lambda or poison-rate axis and emits plot-ready CSV rows, and
:func:`report` aggregates a record file into a pass/fail matrix with an
integrity re-check of every stored perturbation summary.

Identical config + seed always reproduces identical records except for
wall-clock fields. Worker-count parallelism (POISONLAB_WORKERS) never
changes results, only scheduling.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any

import numpy as np

from .bilevel import (
    AttackResult,
    BilevelProblem,
    HypergradConfig,
    hypergrad_attack,
    implicit_hypergradient,
    pbgd_attack,
)
from .diffnum import OptimizerConfig, train_inner
from .detect import evaluate_detectors
from .memory import (
    CovertnessBudget,
    Edit,
    MemoryStore,
    Perturbation,
    align_free_vector,
    covertness_cost,
    perturbation_from_json,
    perturbation_norms,
    perturbation_to_json,
    poison_rate,
    project,
    semantic_distances,
)

SCHEMA_VERSION = 1
WORKERS_ENV = "POISONLAB_WORKERS"

SCENARIOS = ("marl", "rag_frozen", "rag_finetune", "quadratic_testbed")
BASELINES = ("random", "greedy_single_level", "none")
SOLVERS = ("ift_cg", "pbgd", "finite_diff")


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


def _merge_defaults(defaults: dict, override: dict, where: str) -> dict:
    out = dict(defaults)
    for key, val in override.items():
        if key not in defaults:
            raise ConfigError(f"unknown key {key!r} in {where}")
        out[key] = val
    return out


@dataclasses.dataclass(frozen=True)
class SolverSettings:
    """Outer-solver knobs; mirrored into :class:`HypergradConfig`."""

    method: str = "ift_cg"
    outer_steps: int = 20
    outer_lr: float = 1.0
    n_restarts: int = 1
    restart_scale: float = 0.5
    max_backtracks: int = 12
    damping: float = 1e-3
    stale_tol: float = 1e-3
    cg_tol: float = 1e-8
    cg_max_iter: int = 300
    penalty_gamma0: float = 10.0
    penalty_growth: float = 1.06
    fd_step: float = 1e-3

    def __post_init__(self):
        if self.method not in SOLVERS:
            raise ConfigError(f"unknown solver method {self.method!r}")
        if self.outer_steps < 1 or self.outer_lr <= 0:
            raise ConfigError("outer_steps must be >= 1 and outer_lr > 0")
        if self.n_restarts < 1:
            raise ConfigError("n_restarts must be >= 1")

    def hypergrad_config(self) -> HypergradConfig:
        return HypergradConfig(
            method=self.method,
            cg_tol=self.cg_tol,
            cg_max_iter=self.cg_max_iter,
            damping=self.damping,
            stale_tol=self.stale_tol,
            penalty_gamma0=self.penalty_gamma0,
            penalty_growth=self.penalty_growth,
            fd_step=self.fd_step,
        )

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "SolverSettings":
        merged = _merge_defaults(
            {f.name: f.default for f in dataclasses.fields(cls)}, obj, "solver"
        )
        return cls(**merged)


@dataclasses.dataclass(frozen=True)
class DetectorSettings:
    eps_detect: float = 0.1
    tau: float = 0.85
    ppl_slack: float = 0.10

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "DetectorSettings":
        merged = _merge_defaults(
            {f.name: f.default for f in dataclasses.fields(cls)}, obj, "detectors"
        )
        return cls(**merged)


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """Top-level experiment description (versioned JSON schema)."""

    scenario: str
    seeds: tuple[int, ...]
    lambda_grid: tuple[float, ...]
    budget: CovertnessBudget
    solver: SolverSettings
    victim: dict
    baselines: tuple[str, ...] = ("random",)
    rho_grid: tuple[float, ...] = (0.0025, 0.005, 0.01)
    random_draws: int = 5
    detectors: DetectorSettings = DetectorSettings()

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if not self.lambda_grid:
            raise ConfigError("lambda_grid must be non-empty")
        if any(lam < 0 for lam in self.lambda_grid):
            raise ConfigError("lambda values must be >= 0")
        bad = [b for b in self.baselines if b not in BASELINES]
        if bad:
            raise ConfigError(f"unknown baselines {bad}")
        if not self.rho_grid or any(r <= 0 for r in self.rho_grid):
            raise ConfigError("rho_grid values must be > 0")
        if list(self.rho_grid) != sorted(self.rho_grid):
            raise ConfigError("rho_grid must be ascending")
        if self.random_draws < 1:
            raise ConfigError("random_draws must be >= 1")
        # scenario-specific victim validation happens in the builder
        _scenario_class(self.scenario).validate_victim(self.victim)

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "scenario": self.scenario,
            "seeds": list(self.seeds),
            "lambda_grid": list(self.lambda_grid),
            "budget": dataclasses.asdict(self.budget),
            "solver": self.solver.to_json(),
            "victim": dict(self.victim),
            "baselines": list(self.baselines),
            "rho_grid": list(self.rho_grid),
            "random_draws": self.random_draws,
            "detectors": self.detectors.to_json(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentConfig":
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        version = obj.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(
                f"unsupported schema_version {version} (expected {SCHEMA_VERSION})"
            )
        known = {
            "schema_version",
            "scenario",
            "seeds",
            "lambda_grid",
            "budget",
            "solver",
            "victim",
            "baselines",
            "rho_grid",
            "random_draws",
            "detectors",
        }
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        if "scenario" not in obj or "seeds" not in obj:
            raise ConfigError("config requires 'scenario' and 'seeds'")
        try:
            budget = CovertnessBudget(**obj.get("budget", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad budget: {exc}") from exc
        return cls(
            scenario=obj["scenario"],
            seeds=tuple(int(s) for s in obj["seeds"]),
            lambda_grid=tuple(float(x) for x in obj.get("lambda_grid", [0.01])),
            budget=budget,
            solver=SolverSettings.from_json(obj.get("solver", {})),
            victim=dict(obj.get("victim", {})),
            baselines=tuple(obj.get("baselines", ["random"])),
            rho_grid=tuple(float(r) for r in obj.get("rho_grid", [0.0025, 0.005, 0.01])),
            random_draws=int(obj.get("random_draws", 5)),
            detectors=DetectorSettings.from_json(obj.get("detectors", {})),
        )

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            obj = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_json(obj)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclasses.dataclass
class RunRecord:
    """One executed attack (or baseline) at a (seed, lambda) cell."""

    schema_version: int
    config_hash: str
    scenario: str
    seed: int
    lam: float
    role: str  # "attack" | "random" | "greedy_single_level"
    status: str  # "ok" | "failed"
    failure: str | None
    axis: str | None  # set by sweeps: "lambda" | "rho"
    axis_value: float | None
    effectiveness: dict
    covertness: dict
    detectors: list[dict]
    solver_stats: dict
    delta: dict | None
    wall_clock_s: float

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "RunRecord":
        fields = {f.name for f in dataclasses.fields(cls)}
        missing = fields - set(obj)
        if missing:
            raise ConfigError(f"record missing fields {sorted(missing)}")
        return cls(**{k: obj[k] for k in fields})

    @property
    def failed(self) -> bool:
        return self.status != "ok"


def save_records(records: list[RunRecord], path: str | Path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def load_records(path: str | Path) -> list[RunRecord]:
    records = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(RunRecord.from_json(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}:{line_no}: bad JSON: {exc}") from exc
    return records


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------


class _MarlScenario:
    """Replay-buffer reward poisoning of the cooperative gridworld critic."""

    primary_metric = "utility_drop"

    VICTIM_DEFAULTS = {
        "width": 4,
        "height": 4,
        "n_agents": 2,
        "horizon": 6,
        "goal_cells": [[0, 0]],
        "gamma": 0.99,
        "epsilon_behavior": 0.2,
        "n_buffer": 4000,
        "target_rule": "freeze",
        "margin": 0.1,
        "inner": {
            "method": "adam",
            "learning_rate": 0.05,
            "steps": 0,
            "batch_size": 256,
            "seed": 0,
            "polish": True,
        },
    }

    @classmethod
    def validate_victim(cls, victim: dict) -> dict:
        merged = _merge_defaults(cls.VICTIM_DEFAULTS, victim, "victim (marl)")
        merged["inner"] = _merge_defaults(
            cls.VICTIM_DEFAULTS["inner"], dict(merged["inner"]), "victim.inner"
        )
        return merged

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.victim = self.validate_victim(config.victim)

    def build(self, seed: int) -> dict:
        from .marl import (
            GridEnv,
            TDLoss,
            TargetPolicy,
            TargetPolicyLoss,
            clean_greedy_visited_states,
            collect_dataset,
            evaluate_utility,
        )

        v = self.victim
        env = GridEnv(
            width=v["width"],
            height=v["height"],
            n_agents=v["n_agents"],
            horizon=v["horizon"],
            goal_cells=tuple(tuple(g) for g in v["goal_cells"]),
            gamma=v["gamma"],
            epsilon_behavior=v["epsilon_behavior"],
        )
        store = collect_dataset(env, v["n_buffer"], seed=seed)
        lower = TDLoss(store, env)
        inner = OptimizerConfig(**{**v["inner"], "seed": seed})
        theta0 = np.zeros(env.n_agents * 5 * env.n_cells)
        theta_clean = train_inner(lower, theta0, None, inner)
        clean_wr = evaluate_utility(theta_clean, env)
        key_states = clean_greedy_visited_states(theta_clean, env)
        target = TargetPolicy.from_rule(env, rule=v["target_rule"])
        upper = TargetPolicyLoss(env, target, key_states=key_states, margin=v["margin"])
        return {
            "env": env,
            "store": store,
            "lower": lower,
            "upper": upper,
            "inner": inner,
            "theta0": theta0,
            "theta_clean": theta_clean,
            "clean_wr": clean_wr,
            "seed": seed,
        }

    def template(self, ctx: dict) -> Perturbation:
        from .memory import full_edit_template

        return full_edit_template(ctx["store"], field="reward")

    def problem(self, ctx: dict, lam: float, budget: CovertnessBudget) -> BilevelProblem:
        return BilevelProblem(
            lower=ctx["lower"],
            upper=ctx["upper"],
            memory=ctx["store"],
            budget=budget,
            inner_cfg=ctx["inner"],
            theta0=ctx["theta0"],
            lam=lam,
        )

    def evaluate(self, ctx: dict, delta: Perturbation, theta: np.ndarray) -> dict:
        from .marl import evaluate_utility, utility_drop

        poisoned_wr = evaluate_utility(theta, ctx["env"])
        return {
            "clean_win_rate": ctx["clean_wr"],
            "poisoned_win_rate": poisoned_wr,
            "utility_drop": utility_drop(ctx["clean_wr"], poisoned_wr),
        }

    def random_delta(
        self, ctx: dict, budget: CovertnessBudget, rng: np.random.Generator
    ) -> Perturbation:
        store = ctx["store"]
        k = budget.max_poisoned(store.element_count)
        if k == 0:
            return Perturbation.empty("modify")
        idx = rng.choice(store.element_count, size=k, replace=False)
        edits = tuple(
            Edit(int(i), "reward", rng.uniform(-budget.linf_max, budget.linf_max, size=1))
            for i in sorted(int(i) for i in idx)
        )
        return project(Perturbation(mode="modify", edits=edits), budget, memory=store)

    def detector_verdicts(
        self, ctx: dict, delta: Perturbation, settings: DetectorSettings
    ) -> list:
        from .memory import apply

        poisoned = apply(ctx["store"], delta)
        return evaluate_detectors(
            ctx["store"],
            poisoned,
            delta,
            eps_detect=settings.eps_detect,
            tau=settings.tau,
            slack=settings.ppl_slack,
        )


class _RagScenario:
    """Document injection against the retrieval pipeline (frozen or
    fine-tuned generator)."""

    primary_metric = "asr"

    VICTIM_DEFAULTS = {
        "n_docs": 2000,
        "n_clusters": 8,
        "dim": 32,
        "value_dim": 16,
        "v_r": 8,
        "n_queries": 240,
        "n_triggers": 24,
        "vocab_size": 64,
        "doc_len": 24,
        "doc_noise": 0.08,
        "query_noise": 0.05,
        "trigger_offset": 1.0,
        "trigger_cluster": 0,
        "temperature": 0.05,
        "top_k": 4,
        "hidden": 32,
        "value_scale": 1.5,
        "clamp_margin": 0.9,
        "inner": {
            "method": "adam",
            "learning_rate": 5e-3,
            "steps": 1500,
            "batch_size": 60,
            "seed": 0,
            "polish": False,
        },
    }

    @classmethod
    def validate_victim(cls, victim: dict) -> dict:
        merged = _merge_defaults(cls.VICTIM_DEFAULTS, victim, "victim (rag)")
        merged["inner"] = _merge_defaults(
            cls.VICTIM_DEFAULTS["inner"], dict(merged["inner"]), "victim.inner"
        )
        return merged

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.victim = self.validate_victim(config.victim)
        self.mode = "frozen" if config.scenario == "rag_frozen" else "finetune"

    def build(self, seed: int) -> dict:
        from .rag import (
            CorpusSpec,
            GenerationLoss,
            AnchorLoss,
            TargetResponseLoss,
            attack_success_rate,
            clean_accuracy,
            default_rag_params,
            make_corpus,
        )

        v = self.victim
        spec = CorpusSpec(
            n_docs=v["n_docs"],
            n_clusters=v["n_clusters"],
            dim=v["dim"],
            value_dim=v["value_dim"],
            v_r=v["v_r"],
            n_queries=v["n_queries"],
            n_triggers=v["n_triggers"],
            vocab_size=v["vocab_size"],
            doc_len=v["doc_len"],
            doc_noise=v["doc_noise"],
            query_noise=v["query_noise"],
            trigger_offset=v["trigger_offset"],
            trigger_cluster=v["trigger_cluster"],
        )
        bundle = make_corpus(spec, seed)
        params = default_rag_params(spec, hidden=v["hidden"], seed=seed)
        temp, k = v["temperature"], v["top_k"]
        inner = OptimizerConfig(**{**v["inner"], "seed": seed})
        gen_loss = GenerationLoss(bundle.kb, bundle.queries, params, temp)
        theta_clean = train_inner(gen_loss, params.generator, None, inner)
        p_clean = params.with_generator(theta_clean)
        clean_acc = clean_accuracy(p_clean, bundle.kb, bundle.queries, temp, k)
        clean_asr = attack_success_rate(p_clean, bundle.kb, bundle.triggers, temp, k)
        upper = TargetResponseLoss(bundle.kb, bundle.triggers, params, temp)
        if self.mode == "frozen":
            lower: Any = AnchorLoss(theta_clean)
            inner_attack = OptimizerConfig(
                method="adam", learning_rate=1e-2, steps=0, batch_size=1,
                seed=seed, polish=True,
            )
            theta0 = theta_clean
        else:
            lower = gen_loss
            inner_attack = inner
            theta0 = params.generator
        return {
            "spec": spec,
            "bundle": bundle,
            "params": params,
            "temp": temp,
            "k": k,
            "inner": inner_attack,
            "lower": lower,
            "upper": upper,
            "theta0": theta0,
            "theta_clean": theta_clean,
            "clean_acc": clean_acc,
            "clean_asr": clean_asr,
            "seed": seed,
        }

    def template(self, ctx: dict) -> Perturbation:
        from .rag import injection_template

        n_inj = self.config.budget.max_poisoned(ctx["bundle"].kb.element_count)
        if n_inj == 0:
            raise ConfigError("budget admits zero injections; raise rho_max")
        return injection_template(
            ctx["bundle"], n_inj, value_scale=self.victim["value_scale"]
        )

    def problem(self, ctx: dict, lam: float, budget: CovertnessBudget) -> BilevelProblem:
        from .rag import clamp_injections

        store = ctx["bundle"].kb
        margin = self.victim["clamp_margin"]
        return BilevelProblem(
            lower=ctx["lower"],
            upper=ctx["upper"],
            memory=store,
            budget=budget,
            inner_cfg=ctx["inner"],
            theta0=ctx["theta0"],
            lam=lam,
            feasibility_clamp=lambda d: clamp_injections(
                store, d, margin * budget.dsem_max
            ),
        )

    def evaluate(self, ctx: dict, delta: Perturbation, theta: np.ndarray) -> dict:
        from .memory import apply
        from .rag import attack_success_rate, clean_accuracy

        bundle, temp, k = ctx["bundle"], ctx["temp"], ctx["k"]
        kb_p = apply(bundle.kb, delta)
        p_post = ctx["params"].with_generator(theta)
        asr = attack_success_rate(p_post, kb_p, bundle.triggers, temp, k)
        acc_p = clean_accuracy(p_post, kb_p, bundle.queries, temp, k)
        return {
            "clean_accuracy": ctx["clean_acc"],
            "poisoned_accuracy": acc_p,
            "accuracy_drop_pp": 100.0 * (ctx["clean_acc"] - acc_p),
            "clean_trigger_asr": ctx["clean_asr"],
            "asr": asr,
        }

    def random_delta(
        self, ctx: dict, budget: CovertnessBudget, rng: np.random.Generator
    ) -> Perturbation:
        # random injections copy uniformly drawn clean documents verbatim,
        # the natural covert baseline at the same injection budget
        from .memory import Document

        kb = ctx["bundle"].kb.data
        k = budget.max_poisoned(ctx["bundle"].kb.element_count)
        if k == 0:
            return Perturbation.empty("inject")
        rows = rng.choice(kb.embeddings.shape[0], size=k, replace=False)
        docs = tuple(
            Document(
                doc_id=-1,
                embedding=kb.embeddings[r],
                value_vector=kb.values[r],
                token_ids=kb.token_ids[r],
                topic_cluster=int(kb.topics[r]),
            )
            for r in sorted(int(r) for r in rows)
        )
        return project(
            Perturbation(mode="inject", injections=docs),
            budget,
            memory=ctx["bundle"].kb,
        )

    def detector_verdicts(
        self, ctx: dict, delta: Perturbation, settings: DetectorSettings
    ) -> list:
        from .memory import apply

        store = ctx["bundle"].kb
        poisoned = apply(store, delta)
        return evaluate_detectors(
            store,
            poisoned,
            delta,
            eps_detect=settings.eps_detect,
            tau=settings.tau,
            slack=settings.ppl_slack,
            vocab_size=ctx["spec"].vocab_size,
        )


class _QuadraticScenario:
    """Analytic quadratic instance; effectiveness is checked against the
    closed-form optimum so solver regressions show up as metric drift."""

    primary_metric = "relative_improvement"

    VICTIM_DEFAULTS = {
        "kind": "identity",  # "identity" | "random"
        "n_theta": 5,
        "n_delta": 5,
        "inner": {
            "method": "sgd",
            "learning_rate": 0.1,
            "steps": 400,
            "batch_size": 64,
            "seed": 0,
            "polish": True,
        },
    }

    @classmethod
    def validate_victim(cls, victim: dict) -> dict:
        merged = _merge_defaults(cls.VICTIM_DEFAULTS, victim, "victim (quadratic)")
        merged["inner"] = _merge_defaults(
            cls.VICTIM_DEFAULTS["inner"], dict(merged["inner"]), "victim.inner"
        )
        if merged["kind"] not in ("identity", "random"):
            raise ConfigError("quadratic kind must be 'identity' or 'random'")
        if merged["kind"] == "identity" and merged["n_theta"] != merged["n_delta"]:
            raise ConfigError("identity instance needs n_theta == n_delta")
        return merged

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.victim = self.validate_victim(config.victim)

    def _instance(self, seed: int):
        v = self.victim
        rng = np.random.default_rng(seed)
        n, m = v["n_theta"], v["n_delta"]
        if v["kind"] == "identity":
            a, b, c = np.eye(n), np.zeros(n), np.eye(n)
        else:
            g = rng.normal(size=(n, n))
            a = g @ g.T + n * np.eye(n)
            b = rng.normal(size=n)
            c = rng.normal(size=(n, m))
        t = rng.normal(size=n)
        return a, b, c, t

    def build(self, seed: int) -> dict:
        from .testbed import make_quadratic_problem

        a, b, c, t = self._instance(seed)
        inner = OptimizerConfig(**{**self.victim["inner"], "seed": seed})
        problem, template, hg_cfg = make_quadratic_problem(
            a, b, c, t, lam=0.0, budget=self.config.budget, inner_cfg=inner
        )
        return {
            "abct": (a, b, c, t),
            "base_problem": problem,
            "template": template,
            "hg_cfg": hg_cfg,
            "seed": seed,
        }

    def template(self, ctx: dict) -> Perturbation:
        return ctx["template"]

    def problem(self, ctx: dict, lam: float, budget: CovertnessBudget) -> BilevelProblem:
        base = ctx["base_problem"]
        return dataclasses.replace(base, lam=lam, budget=budget)

    def evaluate(self, ctx: dict, delta: Perturbation, theta: np.ndarray) -> dict:
        from .oracles import QuadraticBilevel, solve_quadratic_closed_form

        a, b, c, t = ctx["abct"]
        lam = ctx.get("lam", 0.0)
        ds, _, _ = solve_quadratic_closed_form(QuadraticBilevel(a, b, c, t, lam))
        dense = np.zeros(c.shape[1])
        for e in delta.edits:
            dense[e.record_index] += e.delta_values[0]
        theta_clean = np.linalg.solve(a, b)
        u0 = 0.5 * float((theta_clean - t) @ (theta_clean - t))
        u = 0.5 * float((np.asarray(theta) - t) @ (np.asarray(theta) - t))
        rel = (u0 - u) / u0 if u0 > 0 else 0.0
        return {
            "upper_at_zero": u0,
            "upper_at_delta": u,
            "relative_improvement": rel,
            "delta_star_max_err": float(np.max(np.abs(dense - ds))),
        }

    def random_delta(
        self, ctx: dict, budget: CovertnessBudget, rng: np.random.Generator
    ) -> Perturbation:
        store = ctx["base_problem"].memory
        k = budget.max_poisoned(store.element_count)
        if k == 0:
            return Perturbation.empty("modify")
        idx = rng.choice(store.element_count, size=k, replace=False)
        edits = tuple(
            Edit(int(i), "reward", rng.uniform(-1.0, 1.0, size=1))
            for i in sorted(int(i) for i in idx)
        )
        return project(Perturbation(mode="modify", edits=edits), budget, memory=store)

    def detector_verdicts(
        self, ctx: dict, delta: Perturbation, settings: DetectorSettings
    ) -> list:
        from .memory import apply

        store = ctx["base_problem"].memory
        poisoned = apply(store, delta)
        return evaluate_detectors(
            store, poisoned, delta, eps_detect=settings.eps_detect,
            tau=settings.tau, slack=settings.ppl_slack,
        )


def _scenario_class(name: str):
    if name == "marl":
        return _MarlScenario
    if name in ("rag_frozen", "rag_finetune"):
        return _RagScenario
    if name == "quadratic_testbed":
        return _QuadraticScenario
    raise ConfigError(f"unknown scenario {name!r}")


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------


def _delta_summary(store: MemoryStore, delta: Perturbation, budget) -> dict:
    linf, l2 = perturbation_norms(delta)
    summary = {
        "mode": delta.mode,
        "n_edits": delta.n_edits,
        "n_injections": delta.n_injections,
        "linf": linf,
        "l2": l2,
        "rho": poison_rate(store, delta),
        "element_count": store.element_count,
        "reg_cost": covertness_cost(store, delta, budget),
    }
    if delta.mode == "inject" and delta.n_injections:
        summary["dsem_max_observed"] = float(semantic_distances(store, delta).max())
    return summary


def _store_of(scenario, ctx: dict) -> MemoryStore:
    if isinstance(scenario, _RagScenario):
        return ctx["bundle"].kb
    if isinstance(scenario, _QuadraticScenario):
        return ctx["base_problem"].memory
    return ctx["store"]


def _run_attack(scenario, ctx, problem, solver: SolverSettings, seed: int,
                delta0: Perturbation) -> AttackResult:
    cfg = solver.hypergrad_config()
    if solver.method == "pbgd":
        return pbgd_attack(
            problem, delta0, cfg,
            outer_steps=solver.outer_steps, outer_lr=solver.outer_lr,
        )
    return hypergrad_attack(
        problem, delta0, cfg,
        outer_steps=solver.outer_steps,
        outer_lr=solver.outer_lr,
        max_backtracks=solver.max_backtracks,
        n_restarts=solver.n_restarts,
        restart_scale=solver.restart_scale,
        seed=seed,
    )


def _greedy_single_level(scenario, ctx, problem, solver: SolverSettings) -> Perturbation:
    """Single-level saliency baseline: one hypergradient at the trained
    parameters, one projected step spending the budget on the highest
    |gradient| coordinates, no further retraining."""
    template = scenario.template(ctx)
    theta = problem.inner_solve(template)
    hg, _ = implicit_hypergradient(
        problem, theta, template, solver.hypergrad_config()
    )
    x = template.free_vector() - solver.outer_lr * hg
    cand = template.with_free_vector(x)
    if problem.feasibility_clamp is not None:
        cand = problem.feasibility_clamp(cand)
    return project(cand, problem.budget, np.abs(hg), memory=problem.memory)


def _record(
    config: ExperimentConfig,
    scenario,
    ctx: dict,
    lam: float,
    role: str,
    status: str,
    failure: str | None,
    delta: Perturbation | None,
    effectiveness: dict,
    detectors: list,
    solver_stats: dict,
    wall_clock: float,
    axis: str | None = None,
    axis_value: float | None = None,
    budget: CovertnessBudget | None = None,
) -> RunRecord:
    budget = budget or config.budget
    store = _store_of(scenario, ctx)
    covertness = (
        _delta_summary(store, delta, budget) if delta is not None else {}
    )
    return RunRecord(
        schema_version=SCHEMA_VERSION,
        config_hash=config.config_hash(),
        scenario=config.scenario,
        seed=ctx["seed"],
        lam=lam,
        role=role,
        status=status,
        failure=failure,
        axis=axis,
        axis_value=axis_value,
        effectiveness=effectiveness,
        covertness=covertness,
        detectors=[v.to_json() for v in detectors],
        solver_stats=solver_stats,
        delta=perturbation_to_json(delta) if delta is not None else None,
        wall_clock_s=wall_clock,
    )


def _failed_record(config, scenario, ctx, lam, role, exc, wall_clock,
                   axis=None, axis_value=None) -> RunRecord:
    return RunRecord(
        schema_version=SCHEMA_VERSION,
        config_hash=config.config_hash(),
        scenario=config.scenario,
        seed=ctx["seed"] if isinstance(ctx, dict) else ctx,
        lam=lam,
        role=role,
        status="failed",
        failure=f"{type(exc).__name__}: {exc}",
        axis=axis,
        axis_value=axis_value,
        effectiveness={},
        covertness={},
        detectors=[],
        solver_stats={},
        delta=None,
        wall_clock_s=wall_clock,
    )


def _trajectory_stats(result: AttackResult) -> dict:
    traj = result.trajectory
    return {
        "n_retrains": result.n_retrains,
        "converged": result.converged,
        "trajectory_len": len(traj),
        "first_objective": traj[0][1] if traj else None,
        "last_objective": traj[-1][1] if traj else None,
        "trajectory": [list(map(float, row)) for row in traj],
        "method": result.diagnostics.get("method"),
    }


def _evaluate_delta(scenario, ctx, problem, delta: Perturbation):
    """Retrain the victim on the perturbed store and score the result."""
    _, theta = problem.true_objective(delta)
    return scenario.evaluate(ctx, delta, theta)


def _random_effectiveness(scenario, ctx, problem, config, lam, budget):
    """Mean effectiveness over seeded random perturbations at the same
    budget (single draws have heavy tails on brittle victims)."""
    per_draw = []
    deltas = []
    for j in range(config.random_draws):
        rng = np.random.default_rng((ctx["seed"] + 1) * 7919 + j)
        d = scenario.random_delta(ctx, budget, rng)
        per_draw.append(_evaluate_delta(scenario, ctx, problem, d))
        deltas.append(d)
    keys = per_draw[0].keys()
    mean = {k: float(np.mean([p[k] for p in per_draw])) for k in keys}
    mean["per_draw"] = per_draw
    # report the draw whose primary metric is closest to the mean
    primary = scenario.primary_metric
    j_star = int(
        np.argmin([abs(p[primary] - mean[primary]) for p in per_draw])
    )
    return mean, deltas[j_star]


def _run_cell(
    config: ExperimentConfig,
    scenario,
    ctx: dict,
    lam: float,
    budget: CovertnessBudget,
    axis: str | None = None,
    axis_value: float | None = None,
    warm_start: Perturbation | None = None,
) -> tuple[list[RunRecord], Perturbation | None]:
    """Attack plus requested baselines at one (seed, lambda, budget) cell."""
    records: list[RunRecord] = []
    seed = ctx["seed"]
    ctx = dict(ctx, lam=lam)
    problem = scenario.problem(ctx, lam, budget)
    best_delta: Perturbation | None = None

    t0 = time.time()
    try:
        delta0 = scenario.template(ctx)
        if warm_start is not None:
            delta0 = delta0.with_free_vector(align_free_vector(delta0, warm_start))
        result = _run_attack(scenario, ctx, problem, config.solver, seed, delta0)
        best_delta = result.delta_star
        eff = scenario.evaluate(ctx, best_delta, result.theta_star)
        verdicts = scenario.detector_verdicts(ctx, best_delta, config.detectors)
        records.append(
            _record(
                config, scenario, ctx, lam, "attack", "ok", None, best_delta,
                eff, verdicts, _trajectory_stats(result), time.time() - t0,
                axis=axis, axis_value=axis_value, budget=budget,
            )
        )
    except Exception as exc:  # noqa: BLE001 - failures become records
        records.append(
            _failed_record(config, scenario, ctx, lam, "attack", exc,
                           time.time() - t0, axis=axis, axis_value=axis_value)
        )

    for baseline in config.baselines:
        if baseline == "none":
            continue
        t0 = time.time()
        try:
            if baseline == "random":
                eff, rep_delta = _random_effectiveness(
                    scenario, ctx, problem, config, lam, budget
                )
                verdicts = scenario.detector_verdicts(
                    ctx, rep_delta, config.detectors
                )
                records.append(
                    _record(
                        config, scenario, ctx, lam, "random", "ok", None,
                        rep_delta, eff, verdicts,
                        {"draws": config.random_draws}, time.time() - t0,
                        axis=axis, axis_value=axis_value, budget=budget,
                    )
                )
            else:
                d = _greedy_single_level(scenario, ctx, problem, config.solver)
                eff = _evaluate_delta(scenario, ctx, problem, d)
                verdicts = scenario.detector_verdicts(ctx, d, config.detectors)
                records.append(
                    _record(
                        config, scenario, ctx, lam, baseline, "ok", None, d,
                        eff, verdicts, {"retrains": 1}, time.time() - t0,
                        axis=axis, axis_value=axis_value, budget=budget,
                    )
                )
        except Exception as exc:  # noqa: BLE001
            records.append(
                _failed_record(config, scenario, ctx, lam, baseline, exc,
                               time.time() - t0, axis=axis, axis_value=axis_value)
            )
    return records, best_delta


def _run_seed(config_json: dict, seed: int) -> list[dict]:
    """All lambda cells for one seed (process-pool entry point)."""
    config = ExperimentConfig.from_json(config_json)
    scenario = _scenario_class(config.scenario)(config)
    try:
        ctx = scenario.build(seed)
    except Exception as exc:  # noqa: BLE001
        return [
            _failed_record(config, scenario, {"seed": seed}, lam, "attack", exc, 0.0).to_json()
            for lam in config.lambda_grid
        ]
    records: list[RunRecord] = []
    for lam in config.lambda_grid:
        cell_records, _ = _run_cell(config, scenario, ctx, lam, config.budget)
        records.extend(cell_records)
    return [r.to_json() for r in records]


def _sweep_seed(config_json: dict, seed: int, axis: str) -> list[dict]:
    config = ExperimentConfig.from_json(config_json)
    scenario = _scenario_class(config.scenario)(config)
    try:
        ctx = scenario.build(seed)
    except Exception as exc:  # noqa: BLE001
        grid = config.lambda_grid if axis == "lambda" else config.rho_grid
        return [
            _failed_record(config, scenario, {"seed": seed}, float(v), "attack",
                           exc, 0.0, axis=axis, axis_value=float(v)).to_json()
            for v in grid
        ]
    records: list[RunRecord] = []
    if axis == "lambda":
        for lam in config.lambda_grid:
            cell, _ = _run_cell(
                config, scenario, ctx, lam, config.budget,
                axis="lambda", axis_value=float(lam),
            )
            records.extend(cell)
    else:
        lam = config.lambda_grid[0]
        warm: Perturbation | None = None
        for rho in config.rho_grid:
            budget = dataclasses.replace(config.budget, rho_max=float(rho))
            cell, best = _run_cell(
                config, scenario, ctx, lam, budget,
                axis="rho", axis_value=float(rho), warm_start=warm,
            )
            records.extend(cell)
            if best is not None:
                warm = best
    return [r.to_json() for r in records]


def _worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be >= 1")
    return n


def _map_seeds(fn, config: ExperimentConfig, seeds, *args) -> list[RunRecord]:
    workers = _worker_count()
    cfg_json = config.to_json()
    if workers == 1 or len(seeds) == 1:
        chunks = [fn(cfg_json, s, *args) for s in seeds]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(seeds))) as pool:
            futures = [pool.submit(fn, cfg_json, s, *args) for s in seeds]
            chunks = [f.result() for f in futures]
    records = [RunRecord.from_json(obj) for chunk in chunks for obj in chunk]
    records.sort(
        key=lambda r: (r.scenario, r.axis or "", r.axis_value or 0.0,
                       r.seed, r.lam, r.role)
    )
    return records


def run(config: ExperimentConfig) -> list[RunRecord]:
    """Execute the configured experiment over all seeds and lambdas."""
    return _map_seeds(_run_seed, config, config.seeds)


def sweep(config: ExperimentConfig, axis: str) -> tuple[list[RunRecord], list[dict]]:
    """Run along ``axis`` ("lambda" | "rho") and build plot-ready rows.

    Rho sweeps chain ascending budgets per seed: each cell warm-starts from
    the previous best perturbation re-aligned onto the dense template.
    Returns (records, csv_rows) where each row carries the attack and
    random-baseline effectiveness for one (axis value, seed) cell.
    """
    if axis not in ("lambda", "rho"):
        raise ConfigError(f"sweep axis must be 'lambda' or 'rho', got {axis!r}")
    records = _map_seeds(_sweep_seed, config, config.seeds, axis)
    rows = sweep_rows(records, _scenario_class(config.scenario).primary_metric)
    return records, rows


def sweep_rows(records: list[RunRecord], primary: str) -> list[dict]:
    cells: dict[tuple, dict] = {}
    for rec in records:
        if rec.axis is None:
            continue
        key = (rec.axis, rec.axis_value, rec.seed, rec.lam)
        cell = cells.setdefault(
            key,
            {
                "axis": rec.axis,
                "axis_value": rec.axis_value,
                "seed": rec.seed,
                "lam": rec.lam,
                "attack_effectiveness": None,
                "random_effectiveness": None,
                "attack_status": None,
            },
        )
        if rec.role == "attack":
            cell["attack_status"] = rec.status
            if not rec.failed:
                cell["attack_effectiveness"] = rec.effectiveness.get(primary)
        elif rec.role == "random" and not rec.failed:
            cell["random_effectiveness"] = rec.effectiveness.get(primary)
    return [cells[k] for k in sorted(cells, key=lambda k: (k[0], k[1], k[2], k[3]))]


def write_sweep_csv(rows: list[dict], path: str | Path) -> None:
    fields = ["axis", "axis_value", "seed", "lam", "attack_effectiveness",
              "random_effectiveness", "attack_status"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k) for k in fields})


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------


def _check_record_integrity(rec: RunRecord) -> list[str]:
    """Re-derive the perturbation summary from the embedded delta and
    compare against what the record claims."""
    problems: list[str] = []
    if rec.failed or rec.delta is None or not rec.covertness:
        return problems
    try:
        delta = perturbation_from_json(rec.delta)
    except Exception as exc:  # noqa: BLE001
        return [f"embedded delta does not parse: {exc}"]
    count = rec.covertness.get("element_count")
    if not count:
        return ["record lacks element_count; cannot re-derive rho"]
    if delta.mode == "inject":
        rho = delta.n_injections / (count + delta.n_injections)
    else:
        touched = len(
            {e.record_index for e in delta.edits if np.any(e.delta_values != 0.0)}
        )
        rho = touched / count
    if abs(rho - rec.covertness.get("rho", -1)) > 1e-12:
        problems.append(
            f"stored rho {rec.covertness.get('rho')} != recomputed {rho}"
        )
    linf, l2 = perturbation_norms(delta)
    for name, fresh in (("linf", linf), ("l2", l2)):
        stored = rec.covertness.get(name)
        if stored is None or abs(stored - fresh) > 1e-9:
            problems.append(f"stored {name} {stored} != recomputed {fresh}")
    return problems


def _mean_sd(values: list[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {
        "mean": float(arr.mean()),
        "sd": float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
        "n": int(arr.size),
    }


def report(records: list[RunRecord], out_dir: str | Path) -> dict:
    """Aggregate records into a pass/fail matrix, summary stats and plot
    CSVs under ``out_dir``. Returns the summary dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    warnings: list[str] = []
    for i, rec in enumerate(records):
        for problem in _check_record_integrity(rec):
            warnings.append(f"record {i} (seed {rec.seed}, role {rec.role}): {problem}")

    matrix_rows = []
    for rec in records:
        detectors_pass = all(not d["flagged"] for d in rec.detectors)
        matrix_rows.append(
            {
                "scenario": rec.scenario,
                "seed": rec.seed,
                "lam": rec.lam,
                "axis": rec.axis or "",
                "axis_value": rec.axis_value if rec.axis_value is not None else "",
                "role": rec.role,
                "status": rec.status,
                "detectors_pass": detectors_pass if rec.detectors else "",
                "rho": rec.covertness.get("rho", ""),
                "effectiveness": json.dumps(
                    {k: v for k, v in rec.effectiveness.items()
                     if isinstance(v, (int, float))}, sort_keys=True),
            }
        )
    with open(out / "matrix.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(matrix_rows[0].keys()) if matrix_rows else
                                ["scenario"])
        writer.writeheader()
        for row in matrix_rows:
            writer.writerow(row)

    groups: dict[tuple, dict[str, list[float]]] = {}
    for rec in records:
        if rec.failed:
            continue
        key = (rec.scenario, rec.role, rec.lam, rec.axis or "", rec.axis_value or "")
        bucket = groups.setdefault(key, {})
        for metric, value in rec.effectiveness.items():
            if isinstance(value, (int, float)):
                bucket.setdefault(metric, []).append(float(value))
    aggregates = [
        {
            "scenario": key[0],
            "role": key[1],
            "lam": key[2],
            "axis": key[3],
            "axis_value": key[4],
            "metrics": {m: _mean_sd(vals) for m, vals in sorted(bucket.items())},
        }
        for key, bucket in sorted(groups.items(), key=lambda kv: repr(kv[0]))
    ]

    n_failed = sum(rec.failed for rec in records)
    summary = {
        "n_records": len(records),
        "n_failed": n_failed,
        "integrity_warnings": warnings,
        "aggregates": aggregates,
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)

    axis_records = [r for r in records if r.axis is not None]
    if axis_records:
        primaries = {r.scenario: _scenario_class(r.scenario).primary_metric
                     for r in axis_records}
        for scen, primary in primaries.items():
            rows = sweep_rows([r for r in axis_records if r.scenario == scen], primary)
            write_sweep_csv(rows, out / f"sweep_{scen}.csv")

    lines = io.StringIO()
    lines.write(f"records: {len(records)}  failed: {n_failed}\n")
    for row in matrix_rows:
        lines.write(
            f"[{'PASS' if row['status'] == 'ok' else 'FAIL'}] "
            f"{row['scenario']} seed={row['seed']} lam={row['lam']} "
            f"role={row['role']}"
        )
        if row["axis"]:
            lines.write(f" {row['axis']}={row['axis_value']}")
        if row["detectors_pass"] != "":
            lines.write(f" detectors={'pass' if row['detectors_pass'] else 'FLAGGED'}")
        lines.write(f" {row['effectiveness']}\n")
    if warnings:
        lines.write("\nintegrity warnings:\n")
        for w in warnings:
            lines.write(f"  WARNING: {w}\n")
    (out / "report.txt").write_text(lines.getvalue())
    return summary
