"""Method x seed experiment suite: train, select, evaluate, probe, report."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evaluation, formats, landscape, trainer
from .nnet import ModelConfig, ParamVec
from .synthgen import DatasetSizes, generate_dataset
from .trainer import TrainerConfig, TrainingDiverged

log = logging.getLogger(__name__)

# method name -> (training mode, use the suite's beta)
METHODS = {
    "single-dg": (None, False),
    "ema-only": ("ema-only", False),
    "mt": ("ss-dgod", False),
    "mt+regul": ("ss-dgod", True),
    "ws": ("ws-dgod", False),
    "ws+regul": ("ws-dgod", True),
    "uda": ("uda", False),
    "uda+regul": ("uda", True),
}
DEFAULT_METHODS = ("single-dg", "ema-only", "mt", "mt+regul", "ws")
VAL_SPLITS = ("val/s2", "val/s3")
EVAL_DOMAINS = ("t", "val/s2", "val/s3")


@dataclass
class SuiteConfig:
    methods: tuple[str, ...] = DEFAULT_METHODS
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    betas: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    gammas: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0, 8.0)
    flat_samples: int = 10
    flat_scenes: int = 200
    gap_gamma: float = 4.0
    gap_samples: int = 20
    data_seed: int = 0
    sizes: DatasetSizes = field(default_factory=DatasetSizes)
    trainer: TrainerConfig = field(default_factory=lambda: suite_trainer())
    dedupe: bool = True
    figures: bool = True

    @property
    def middle_gamma(self) -> float:
        return self.gammas[len(self.gammas) // 2]


def suite_trainer(**overrides) -> TrainerConfig:
    """Trainer settings of the benchmark suite.

    The EMA horizon is shortened to 1/(1 - 0.999) = 1000 steps so that a
    6000-step run spans several horizons and the teacher can settle.
    """
    base = dict(alpha=0.999, iters_mt=6000)
    base.update(overrides)
    return TrainerConfig(**base)


_LIST_KEYS = {"methods": str, "seeds": int, "betas": float, "gammas": float}


def parse_suite(text: str) -> SuiteConfig:
    """Suite file: flat key=value; list keys are comma separated.

    Keys of ``TrainerConfig`` and ``DatasetSizes`` are accepted directly.
    """
    raw = formats.parse_kv(text)
    suite_keys = {f.name for f in dataclasses.fields(SuiteConfig)} - {"sizes", "trainer"}
    trainer_keys = set(TrainerConfig.keys())
    size_keys = {f.name for f in dataclasses.fields(DatasetSizes)}
    unknown = set(raw) - suite_keys - trainer_keys - size_keys
    if unknown:
        raise formats.FormatError(f"unknown suite keys: {sorted(unknown)}")
    t_text = "".join(f"{k}={v}\n" for k, v in raw.items() if k in trainer_keys)
    s_text = "".join(f"{k}={v}\n" for k, v in raw.items() if k in size_keys)
    t_raw = formats.parse_kv(t_text)
    t_defaults = dataclasses.asdict(suite_trainer())
    t_text = "".join(f"{k}={t_raw.get(k, v)}\n" for k, v in t_defaults.items())
    kwargs = {"trainer": formats.load_dataclass_config(TrainerConfig, t_text),
              "sizes": formats.load_dataclass_config(DatasetSizes, s_text)}
    for k, v in raw.items():
        if k in _LIST_KEYS:
            kwargs[k] = tuple(_LIST_KEYS[k](x.strip()) for x in v.split(",") if x.strip())
        elif k in suite_keys:
            kwargs[k] = formats._coerce(v, {f.name: f.type for f in
                                             dataclasses.fields(SuiteConfig)}[k])
    config = SuiteConfig(**kwargs)
    bad = [m for m in config.methods if m not in METHODS]
    if bad:
        raise formats.FormatError(f"unknown methods: {bad}")
    return config


def method_runs(config: SuiteConfig) -> list[tuple[str, str | None, float]]:
    """Expand methods and the beta sweep into ``(name, mode, beta)`` rows."""
    runs = []
    for m in config.methods:
        mode, regul = METHODS[m]
        runs.append((m, mode, config.trainer.beta if regul else 0.0))
    # the beta sweep belongs to the regularized mean teacher
    if "mt+regul" in config.methods:
        for b in config.betas:
            runs.append((sweep_name(b), "ss-dgod", float(b)))
    return runs


def sweep_name(beta: float) -> str:
    return f"mt+regul@beta={beta:g}"


@dataclass
class CellResult:
    method: str
    seed: int
    status: str
    mode: str | None = None
    beta: float = 0.0
    ap: dict[str, dict[int, float]] = field(default_factory=dict)
    map50: dict[str, float] = field(default_factory=dict)
    flat: dict[tuple[str, str], list[float]] = field(default_factory=dict)  # (network, risk)
    gap: dict[str, float] = field(default_factory=dict)
    best_iteration: int = -1
    seconds: float = 0.0


@dataclass
class SuiteResult:
    config: SuiteConfig
    cells: list[CellResult]
    checks: dict[str, bool] = field(default_factory=dict)
    details: dict[str, str] = field(default_factory=dict)

    def maps(self, method: str, domain: str = "t") -> np.ndarray:
        return np.array([c.map50[domain] for c in self.cells
                         if c.method == method and c.status == "ok"])

    def mean_map(self, method: str, domain: str = "t") -> float:
        v = self.maps(method, domain)
        return float(v.mean()) if v.size else float("nan")

    def mean_flat(self, method: str, network: str, risk: str, gamma: float) -> float:
        gi = self.config.gammas.index(gamma)
        vals = [c.flat[(network, risk)][gi] for c in self.cells
                if c.method == method and c.status == "ok" and (network, risk) in c.flat]
        return float(np.mean(vals)) if vals else float("nan")


class _Context:
    """Dataset, frozen risks and validators shared by every cell of a suite."""

    def __init__(self, config: SuiteConfig, model_config: ModelConfig):
        self.config = config
        self.model_config = model_config
        self.dataset = generate_dataset(config.data_seed, config.sizes)
        n = config.flat_scenes
        ds = self.dataset
        self.risks = {
            "empirical": landscape.empirical_risk(
                {k: ds[k][:n] for k in ("s1", "s2", "s3")}, config.data_seed, model_config),
            "target": landscape.target_risk(ds["t/test"][:n], config.data_seed, model_config),
        }
        self.pretrained: dict[int, tuple[ParamVec, ParamVec, int]] = {}

    def validate(self, params: ParamVec) -> float:
        return float(np.mean([evaluation.evaluate(params, self.dataset[k], self.model_config)[1]
                              for k in VAL_SPLITS]))

    def pretrain(self, seed: int) -> tuple[ParamVec, ParamVec, int]:
        """Final pretrained params (init for every method) and the best-on-validation one."""
        if seed not in self.pretrained:
            cfg = dataclasses.replace(self.config.trainer, seed=seed)
            best = {"score": -np.inf, "params": None, "it": -1}

            def monitor(it, params):
                score = self.validate(params)
                if score > best["score"]:
                    best.update(score=score, params=params, it=it)

            final = trainer.pretrain(cfg, self.dataset["s1"], self.model_config, monitor=monitor)
            if best["params"] is None:
                best.update(params=final, it=cfg.iters_pretrain)
            self.pretrained[seed] = (final, best["params"], best["it"])
        return self.pretrained[seed]

    def evaluate_cell(self, cell: CellResult, networks: dict[str, ParamVec]) -> None:
        evaluated = networks["teacher"]
        for dom in EVAL_DOMAINS:
            split = "t/test" if dom == "t" else dom
            per_class, m = evaluation.evaluate(evaluated, self.dataset[split], self.model_config)
            cell.ap[dom] = per_class
            cell.map50[dom] = m
        cfg = self.config
        for net_name, params in networks.items():
            for risk_name, risk in self.risks.items():
                rng = np.random.default_rng([cfg.data_seed, cell.seed, 7])
                rep = landscape.flatness(params, risk, cfg.gammas, cfg.flat_samples, rng,
                                         surface=risk_name)
                cell.flat[(net_name, risk_name)] = rep.means


def _run_cell(ctx: _Context, name: str, mode: str | None, beta: float, seed: int,
              cache: dict) -> CellResult:
    cfg = ctx.config
    t0 = time.perf_counter()
    cell = CellResult(name, seed, "ok", mode, beta)
    key = (mode, beta, seed)
    try:
        if cfg.dedupe and key in cache:
            src = cache[key]
            cell.ap, cell.map50, cell.flat, cell.gap = src.ap, src.map50, src.flat, src.gap
            cell.best_iteration = src.best_iteration
            return cell
        final, best, best_it = ctx.pretrain(seed)
        if mode is None:
            cell.best_iteration = best_it
            ctx.evaluate_cell(cell, {"teacher": best})
        else:
            tcfg = dataclasses.replace(cfg.trainer, seed=seed, beta=beta)
            data = trainer.train_data_for(mode, ctx.dataset)
            state = trainer.train(mode, tcfg, data, final, ctx.model_config,
                                  validator=ctx.validate)
            cell.best_iteration = state.best_iteration
            nets = {"teacher": state.best_teacher, "student": state.best_student}
            ctx.evaluate_cell(cell, nets)
            risk = ctx.risks["empirical"]
            snaps = [p for _, p in state.student_snapshots] or [state.student]
            floor = landscape.trajectory_min_risk(snaps, risk)
            for net_name, params in nets.items():
                rng = np.random.default_rng([cfg.data_seed, seed, 11])
                cell.gap[net_name] = landscape.rrm_erm_gap(params, floor, risk, cfg.gap_gamma,
                                                           cfg.gap_samples, rng)
        cache[key] = cell
    except (TrainingDiverged, FloatingPointError, ValueError) as exc:
        log.warning("cell %s seed %d failed: %s", name, seed, exc)
        cell.status = "failed"
    finally:
        cell.seconds = time.perf_counter() - t0
    return cell


def run_benchmark(config: SuiteConfig, out_dir: Path | None = None,
                  model_config: ModelConfig = ModelConfig()) -> SuiteResult:
    ctx = _Context(config, model_config)
    cache: dict = {}
    cells = []
    for seed in config.seeds:
        for name, mode, beta in method_runs(config):
            cell = _run_cell(ctx, name, mode, beta, seed, cache)
            log.info("%-14s seed=%d status=%s mAP50(t)=%.4f (%.1fs)", name, seed, cell.status,
                     cell.map50.get("t", float("nan")), cell.seconds)
            cells.append(cell)
    result = SuiteResult(config, cells)
    compute_checks(result)
    if out_dir is not None:
        write_reports(result, Path(out_dir))
    return result


def compute_checks(result: SuiteResult) -> None:
    """Evaluate the directional checks on seed means (only for methods present)."""
    m = result.mean_map
    names = {c.method for c in result.cells}
    checks, details = result.checks, result.details
    g = result.config.middle_gamma

    def need(*methods):
        return all(x in names for x in methods)

    if need("single-dg", "ema-only"):
        checks["single_lt_ema"] = m("single-dg") < m("ema-only")
    if need("single-dg", "mt"):
        checks["single_lt_mt"] = m("single-dg") < m("mt")
    if need("mt", "mt+regul"):
        checks["mt_lt_mtregul"] = m("mt") < m("mt+regul")
    if need("single-dg", "mt+regul"):
        gain = m("mt+regul") - m("single-dg")
        checks["mtregul_gain_ge_3pt"] = gain >= 0.03
        details["mtregul_gain_ge_3pt"] = f"gain={100 * gain:.2f} points"
    if need("mt", "ws"):
        checks["ws_ge_ss"] = m("ws") >= m("mt")
    sweep = [sweep_name(b) for b in result.config.betas]
    if sweep and need(*sweep):
        complete = all(c.status == "ok" for c in result.cells if c.method in sweep)
        checks["beta_sweep_complete"] = complete
        if need(sweep_name(0), sweep_name(0.5)):
            checks["beta05_ge_beta0"] = m(sweep_name(0.5)) >= m(sweep_name(0))
            details["beta05_ge_beta0"] = " ".join(f"{b:g}:{100 * m(sweep_name(b)):.2f}"
                                                  for b in result.config.betas)
    if need("mt", "mt+regul", "ema-only"):
        fr = result.mean_flat("mt+regul", "teacher", "target", g)
        fm = result.mean_flat("mt", "teacher", "target", g)
        fe = result.mean_flat("ema-only", "student", "target", g)
        checks["flat_order_target"] = fr <= fm <= fe
        details["flat_order_target"] = (f"mt+regul={fr:.5f} mt={fm:.5f} "
                                        f"ema-only.student={fe:.5f} at gamma={g:g}")
    mt_methods = [x for x in ("mt", "mt+regul", "ws", "ws+regul", "uda", "uda+regul") if x in names]
    if mt_methods:
        parts, ok = [], True
        for x in mt_methods:
            ft = result.mean_flat(x, "teacher", "target", g)
            fs = result.mean_flat(x, "student", "target", g)
            ok &= ft <= fs
            parts.append(f"{x}: T={ft:.5f} S={fs:.5f}")
        checks["teacher_flatter"] = bool(ok)
        details["teacher_flatter"] = "; ".join(parts)
    if need("mt"):
        gt = [c.gap["teacher"] for c in result.cells if c.method == "mt" and c.gap]
        gs = [c.gap["student"] for c in result.cells if c.method == "mt" and c.gap]
        if gt:
            checks["gap_teacher_le_student"] = float(np.mean(gt)) <= float(np.mean(gs))
            details["gap_teacher_le_student"] = f"teacher={np.mean(gt):.5f} student={np.mean(gs):.5f}"


def _net_label(method: str, network: str) -> str:
    return method if network == "teacher" else f"{method}.{network}"


def write_reports(result: SuiteResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for c in result.cells:
        if c.status != "ok":
            rows.append([c.method, c.seed, "t", "", "", "failed"])
            continue
        for dom, per_class in c.ap.items():
            for k, ap in per_class.items():
                rows.append([c.method, c.seed, dom, k, ap, c.map50[dom]])
    formats.write_csv(out / "eval.csv", ["method", "seed", "domain", "class", "ap", "map50"], rows)

    rows = []
    for c in result.cells:
        for (net, risk), means in c.flat.items():
            for gamma, f in zip(result.config.gammas, means):
                rows.append([_net_label(c.method, net), c.seed, risk, gamma, f])
    formats.write_csv(out / "flatness.csv", ["method", "seed", "risk", "gamma", "fgamma"], rows)

    rows = []
    for c in result.cells:
        for net, gap in c.gap.items():
            rows.append([c.method, c.seed, net, result.config.gap_gamma, gap])
    formats.write_csv(out / "gap.csv", ["method", "seed", "network", "gamma", "gap"], rows)

    check_names = list(result.checks)
    rows = []
    for method in dict.fromkeys(c.method for c in result.cells):
        v = result.maps(method)
        rows.append([method, float(v.mean()) if v.size else float("nan"),
                     float(v.std(ddof=1)) if v.size > 1 else 0.0,
                     *[result.checks[k] for k in check_names]])
    formats.write_csv(out / "summary.csv", ["method", "mean_map", "std_map", *check_names], rows)
    formats.write_csv(out / "checks.csv", ["check", "passed", "detail"],
                      [[k, v, result.details.get(k, "")] for k, v in result.checks.items()])
    if result.config.figures:
        from . import plotting
        plotting.write_figures(result, out)
