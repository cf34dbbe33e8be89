"""Training loops with warm-up and model selection, Adam, the gamma
sweep, and the experiment-suite orchestrator."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .data import (
    LabeledTable,
    SplitBundle,
    class_removal_split,
    embed_dataset,
    load_csv,
    make_constant,
    make_noise,
    make_oodomain,
    make_smoothness,
    make_two_moons,
    standardize,
)
from .evaluate import (
    EvalReport,
    density_histogram,
    norm_sweep,
    ood_report,
    random_unit_directions,
    score_logdensity,
    selection_score,
    unit_directions_through,
    write_series_csv,
)
from .models import (
    ModelSpec,
    ParameterSet,
    _atomic_write_json,
    init_params,
    load_checkpoint,
    mlp_logits,
    param_nodes,
    save_checkpoint,
)
from .objectives import (
    VeraConfig,
    cd_loss,
    ce_loss,
    flow_nll,
    generator_spec,
    jem_loss,
    make_energy_fn,
    ssm_vr_loss,
    vera_step,
)
from .rng import rademacher, stream
from .samplers import AscentTrajectory, ReplayBuffer, SgldConfig, likelihood_ascent, sgld_chain

OBJECTIVES = ("ssm", "cd", "vera", "nf", "ce")
DEFAULT_LR = {"ssm": 1e-3, "cd": 1e-3, "vera": 3e-4, "nf": 1e-3, "ce": 1e-3}
DEFAULT_GAMMA_GRID = (0.0, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0)


class ConfigError(Exception):
    pass


class TrainingError(Exception):
    pass


def warmup_lr(base_lr: float, step: int, warmup_steps: int = 2500) -> float:
    """Linear ramp from 0 to base_lr over the warm-up window."""
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, step / warmup_steps)


class Adam:
    def __init__(self, size: int, betas=(0.9, 0.999), eps: float = 1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0

    def step(self, grad: np.ndarray, lr: float) -> np.ndarray:
        """Returns the update to subtract from the parameters."""
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        return lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class RunConfig:
    objective: str
    data: dict
    gamma: float = 0.0
    seed: int = 0
    steps: int = 10000
    warmup_steps: int = 2500
    batch_size: int = 64
    lr: float | None = None
    weight_decay: float = 5e-4  # CE baseline only
    eval_interval: int = 500
    patience: int = 10          # NF / CE early stopping
    hidden: list[int] = field(default_factory=lambda: [100] * 5)
    activation: str = "relu"
    bottleneck_factor: float | None = None
    n_flow_layers: int = 20
    sgld_steps: int = 100
    sgld_step_size: float = 1.0
    sgld_noise_std: float = 0.01
    buffer_capacity: int = 10000
    reinit_prob: float = 0.05
    data_noise_var: float = 0.1  # additive noise on CD data batches
    vera: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.gamma < 0:
            raise ConfigError("gamma must be nonnegative")
        if self.objective in ("nf", "ce") and self.gamma != 0.0:
            raise ConfigError(f"gamma does not apply to objective {self.objective!r}")
        if not isinstance(self.data, dict) or "kind" not in self.data:
            raise ConfigError("data config must be a dict with a 'kind'")

    @property
    def base_lr(self) -> float:
        return self.lr if self.lr is not None else DEFAULT_LR[self.objective]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        allowed = set(cls.__dataclass_fields__)
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)


def build_bundle(config: RunConfig) -> SplitBundle:
    """Standardized split bundle from the run's data config."""
    d = dict(config.data)
    kind = d.pop("kind")
    seed = d.pop("seed", config.seed)
    if kind == "csv":
        table = load_csv(d.pop("path"), d.pop("label_column", "label"))
        removed = d.pop("removed_classes", [])
        bundle = class_removal_split(
            table,
            removed,
            val_frac=d.pop("ood_val_frac", 0.1),
            id_fracs=tuple(d.pop("id_fracs", (0.7, 0.1, 0.2))),
            seed=seed,
        )
    elif kind == "two_moons":
        n = d.pop("n", 2000)
        noise_std = d.pop("noise_std", 0.1)
        margin = d.pop("ood_margin", 1.5)
        # uniform points landing on the moons are not out-of-distribution;
        # resample anything closer than this to a data point
        exclusion = d.pop("ood_exclusion_radius", 0.3)
        rng = stream(seed, "data")
        table = make_two_moons(n, noise_std, rng)
        idx = rng.permutation(n)
        n_tr, n_va = round(0.7 * n), round(0.1 * n)
        lo = table.features.min(axis=0) - margin
        hi = table.features.max(axis=0) + margin
        n_ood = n - n_tr - n_va
        want = n_ood + max(n_ood // 5, 10)
        chunks = []
        got = 0
        while got < want:
            cand = rng.uniform(lo, hi, size=(want, table.dim))
            if exclusion > 0:
                d2 = ((cand[:, None, :] - table.features[None, :, :]) ** 2).sum(axis=2)
                cand = cand[np.sqrt(d2.min(axis=1)) >= exclusion]
            chunks.append(cand)
            got += len(cand)
        ood = np.concatenate(chunks)[:want]
        bundle = SplitBundle(
            id_train=table.take(idx[:n_tr]),
            id_val=table.take(idx[n_tr:n_tr + n_va]),
            id_test=table.take(idx[n_tr + n_va:]),
            ood_val=LabeledTable(ood[n_ood:], source="uniform-noise"),
            ood_test=LabeledTable(ood[:n_ood], source="uniform-noise"),
        )
    else:
        raise ConfigError(f"unknown data kind {kind!r}")
    if d:
        raise ConfigError(f"unknown data keys: {sorted(d)}")
    return standardize(bundle)


def build_model_spec(config: RunConfig, bundle: SplitBundle) -> ModelSpec:
    dim = bundle.id_train.dim
    if config.objective == "nf":
        return ModelSpec(input_dim=dim, head="flow", n_flow_layers=config.n_flow_layers)
    n_classes = None
    head = "energy"
    if config.objective == "ce" or config.gamma > 0:
        if bundle.id_train.labels is None:
            raise ConfigError("supervised training requires labels")
        n_classes = int(bundle.id_train.labels.max()) + 1
        head = "logits"
    return ModelSpec(
        input_dim=dim,
        hidden=list(config.hidden),
        activation=config.activation,
        head=head,
        n_classes=n_classes,
        bottleneck_factor=config.bottleneck_factor,
    )


def standard_ood_sets(bundle: SplitBundle, seed: int) -> tuple[dict, dict]:
    """Natural (removed classes) plus the synthetic probe datasets."""
    rng = stream(seed, "eval")
    n = bundle.id_test.n
    dim = bundle.id_test.dim
    sets = {
        "noise": make_noise(n, dim, rng),
        "constant": make_constant(n, dim, rng),
        "oodomain": make_oodomain(bundle.id_test.features),
    }
    groups = {"noise": "non-natural", "constant": "non-natural", "oodomain": "non-natural"}
    if bundle.ood_test.n > 0:
        name = bundle.ood_test.source or "removed-classes"
        sets[name] = bundle.ood_test.features
        groups[name] = "natural"
    return sets, groups


@dataclass
class TrainResult:
    config: RunConfig
    spec: ModelSpec
    params: ParameterSet
    report: EvalReport
    bundle: SplitBundle
    history: dict
    gen_spec: ModelSpec | None = None
    gen_params: ParameterSet | None = None


def _flatten_grads(pset: ParameterSet, grads: dict[str, ad.Node]) -> np.ndarray:
    flat = np.zeros(pset.size)
    for name, start, shape in pset.offsets:
        size = int(np.prod(shape)) if shape else 1
        flat[start:start + size] = grads[name].value.ravel()
    return flat


def _param_grads(loss: ad.Node, leaves: dict[str, ad.Node], pset: ParameterSet) -> np.ndarray:
    names = list(leaves)
    gs = ad.grad(loss, [leaves[n] for n in names])
    return _flatten_grads(pset, dict(zip(names, gs)))


def train(config: RunConfig, bundle: SplitBundle | None = None) -> TrainResult:
    """Run the configured objective and keep the best-selection checkpoint.

    EBM objectives select on ood_val AP every ``eval_interval`` steps; NF
    early-stops on validation log-likelihood and CE on validation
    accuracy, both with the configured patience.
    """
    if bundle is None:
        bundle = build_bundle(config)
    spec = build_model_spec(config, bundle)
    pset = init_params(spec, config.seed)
    data_rng = stream(config.seed, "data")
    x_train = bundle.id_train.features
    y_train = bundle.id_train.labels
    n_train = x_train.shape[0]

    adam = Adam(pset.size)
    history = {"loss": [], "selection": [], "stopped_at": None, "diverged": False}

    # objective-specific state
    sgld_rng = stream(config.seed, "sgld")
    proj_rng = stream(config.seed, "projection")
    vera_rng = stream(config.seed, "vera")
    buf_rng = stream(config.seed, "buffer")
    buffer = None
    gen_spec = gen_params = gen_adam = None
    vera_cfg = None
    eta = None
    if config.objective == "cd":
        lo = x_train.min(axis=0)
        hi = x_train.max(axis=0)
        buffer = ReplayBuffer(
            capacity=config.buffer_capacity,
            reinit_prob=config.reinit_prob,
            reinit_sampler=lambda rng, k: rng.uniform(lo, hi, size=(k, x_train.shape[1])),
        )
    elif config.objective == "vera":
        vera_cfg = VeraConfig(**config.vera)
        gen_spec = generator_spec(x_train.shape[1], vera_cfg)
        gen_params = init_params(gen_spec, config.seed + 1)
        gen_adam = Adam(gen_params.size, betas=vera_cfg.gen_betas)
        eta = vera_cfg.eta_init

    best = pset.copy()
    best_score = -math.inf
    patience_left = config.patience
    selection_mode = "ood_ap" if config.objective in ("ssm", "cd", "vera") else (
        "val_ll" if config.objective == "nf" else "val_acc"
    )

    def evaluate_selection() -> float:
        if selection_mode == "ood_ap":
            return selection_score(spec, pset, bundle)
        if selection_mode == "val_ll":
            return float(score_logdensity(spec, pset, bundle.id_val.features).mean())
        logits = mlp_logits(spec, pset, bundle.id_val.features).value
        return float((logits.argmax(axis=1) == bundle.id_val.labels).mean())

    sgld_cfg = SgldConfig(
        steps=config.sgld_steps,
        step_size=config.sgld_step_size,
        noise_std=config.sgld_noise_std,
    )

    step = 0
    for step in range(1, config.steps + 1):
        idx = data_rng.integers(0, n_train, size=min(config.batch_size, n_train))
        xb = x_train[idx]
        yb = y_train[idx] if y_train is not None else None
        lr = warmup_lr(config.base_lr, step, config.warmup_steps)

        if config.objective == "vera":
            vs = vera_step(
                spec, pset, gen_spec, gen_params, xb, vera_cfg, eta, vera_rng,
                gamma=config.gamma, labels=yb,
            )
            loss_val = float(vs.ebm_loss.value)
            if not np.isfinite(loss_val):
                history["diverged"] = True
                break
            g_ebm = _param_grads(vs.ebm_loss, vs.ebm_leaves, pset)
            g_gen = _param_grads(vs.gen_loss, vs.gen_leaves, gen_params)
            pset.values -= adam.step(g_ebm, warmup_lr(vera_cfg.ebm_lr, step, config.warmup_steps))
            gen_params.values -= gen_adam.step(
                g_gen, warmup_lr(vera_cfg.gen_lr, step, config.warmup_steps)
            )
            eta = vs.eta
        else:
            leaves = param_nodes(pset)
            if config.objective == "ssm":
                energy = make_energy_fn(spec, leaves)
                v = rademacher(proj_rng, xb.shape)
                loss = ssm_vr_loss(energy, xb, v)
            elif config.objective == "cd":
                energy = make_energy_fn(spec, leaves)
                starts, slots = buffer.draw(xb.shape[0], buf_rng)
                const_energy = make_energy_fn(spec, pset)
                samples = sgld_chain(const_energy, starts, sgld_cfg, sgld_rng)
                buffer.write(slots, samples)
                xb_noisy = xb + math.sqrt(config.data_noise_var) * data_rng.normal(size=xb.shape)
                loss = cd_loss(energy, xb_noisy, samples)
            elif config.objective == "nf":
                loss = flow_nll(spec, leaves, xb)
            elif config.objective == "ce":
                loss = ce_loss(mlp_logits(spec, leaves, xb), yb)
            else:
                raise ConfigError(config.objective)
            if config.gamma > 0 and config.objective in ("ssm", "cd"):
                loss = jem_loss(loss, mlp_logits(spec, leaves, xb), yb, config.gamma)
            loss_val = float(loss.value)
            if not np.isfinite(loss_val):
                history["diverged"] = True
                break
            grad_flat = _param_grads(loss, leaves, pset)
            if config.objective == "ce" and config.weight_decay > 0:
                grad_flat = grad_flat + config.weight_decay * pset.values
            pset.values -= adam.step(grad_flat, lr)

        history["loss"].append(loss_val)

        if step % config.eval_interval == 0 or step == config.steps:
            score = evaluate_selection()
            history["selection"].append({"step": step, "score": score})
            if score > best_score:
                best_score = score
                best = pset.copy()
                patience_left = config.patience
            elif selection_mode in ("val_ll", "val_acc"):
                patience_left -= 1
                if patience_left <= 0:
                    history["stopped_at"] = step
                    break

    if config.steps == 0 or best_score == -math.inf:
        best = pset.copy()
        best_score = evaluate_selection() if config.steps > 0 else None

    ood_sets, groups = standard_ood_sets(bundle, config.seed)
    run_meta = {
        "objective": config.objective,
        "gamma": config.gamma,
        "bottleneck": config.bottleneck_factor,
        "seed": config.seed,
        "selection_score": best_score,
    }
    report = ood_report(spec, best, bundle, ood_sets, groups, run_meta)
    return TrainResult(
        config=config,
        spec=spec,
        params=best,
        report=report,
        bundle=bundle,
        history=history,
        gen_spec=gen_spec,
        gen_params=gen_params,
    )


def save_run(result: TrainResult, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    save_checkpoint(
        os.path.join(out_dir, "checkpoint.json"),
        result.spec,
        result.params,
        metadata={"config": result.config.to_dict()},
    )
    result.report.save(os.path.join(out_dir, "report.json"))


def gamma_sweep(base_config: RunConfig, grid=DEFAULT_GAMMA_GRID, seeds=(0,)) -> list[TrainResult]:
    """One trained model per (gamma, seed) on the shared base config."""
    results = []
    for gamma in grid:
        for seed in seeds:
            d = base_config.to_dict()
            d["gamma"] = float(gamma)
            d["seed"] = int(seed)
            results.append(train(RunConfig.from_dict(d)))
    return results


def _run_label(name: str, config: RunConfig, embedded: bool) -> str:
    label = name
    if config.gamma == 1.0:
        label += "-S"
    if embedded:
        label += "-E"
    return label


def run_experiment_suite(manifest: dict, out_root: str) -> dict:
    """Execute a manifest of runs and follow-up analyses.

    Each run gets its own report directory; an aggregate CSV collects
    every AP plus the percent improvement over a declared baseline run.
    A failing run is recorded and skipped; the suite continues.
    """
    os.makedirs(out_root, exist_ok=True)
    runs = manifest.get("runs", [])
    analyses = manifest.get("analyses", [])
    results: dict[str, TrainResult] = {}
    errors: dict[str, str] = {}

    for item in runs:
        name = item["name"]
        try:
            config = RunConfig.from_dict(item["config"])
            bundle = None
            embedded = False
            if "embed_from" in item:
                source = results.get(item["embed_from"])
                if source is None:
                    raise ConfigError(f"embed_from run {item['embed_from']!r} unavailable")
                bundle = embed_dataset(source.spec, source.params, source.bundle)
                embedded = True
            result = train(config, bundle=bundle)
            result.report.run["label"] = _run_label(name, config, embedded)
            result.report.run["name"] = name
            save_run(result, os.path.join(out_root, name))
            results[name] = result
        except Exception as exc:  # isolate failing runs
            errors[name] = f"{type(exc).__name__}: {exc}"

    rows = []
    for item in runs:
        name = item["name"]
        if name not in results:
            continue
        result = results[name]
        base_name = item.get("baseline")
        base_aps = {}
        if base_name and base_name in results:
            base_aps = {r["ood_set"]: r["auc_pr"] for r in results[base_name].report.results}
        for r in result.report.results:
            rel = ""
            if r["ood_set"] in base_aps and base_aps[r["ood_set"]] > 0:
                rel = repr(100.0 * (r["auc_pr"] - base_aps[r["ood_set"]]) / base_aps[r["ood_set"]])
            rows.append([
                name,
                result.report.run.get("label", name),
                result.config.objective,
                result.config.gamma,
                result.config.seed,
                r["ood_set"],
                r["group"],
                repr(r["auc_pr"]),
                base_name or "",
                rel,
            ])
    agg_path = os.path.join(out_root, "aggregate.csv")
    write_series_csv(
        agg_path,
        rows,
        header=(
            "name", "label", "objective", "gamma", "seed",
            "ood_set", "group", "auc_pr", "baseline", "rel_improvement_pct",
        ),
    )

    for item in analyses:
        name = item.get("name", item["kind"])
        try:
            _run_analysis(item, results, out_root)
        except Exception as exc:
            errors[name] = f"{type(exc).__name__}: {exc}"

    summary = {
        "runs": sorted(results),
        "errors": errors,
        "aggregate": os.path.basename(agg_path),
    }
    _atomic_write_json(os.path.join(out_root, "suite_summary.json"), summary)
    return summary


def _run_analysis(item: dict, results: dict[str, TrainResult], out_root: str):
    kind = item["kind"]
    name = item.get("name", kind)
    model = results[item["model"]]
    out = os.path.join(out_root, f"{name}.csv")
    if kind == "norm_sweep":
        radii = [float(r) for r in item.get("radii", [0, 1, 2, 5, 10, 20, 50])]
        anchor = model.bundle.id_train.features.mean(axis=0)
        mode = item.get("directions", "heldout")
        if mode == "heldout":
            dirs = unit_directions_through(
                anchor, model.bundle.id_test.features[: item.get("n_directions", 64)]
            )
        else:
            dirs = random_unit_directions(
                model.bundle.id_train.dim, item.get("n_directions", 64),
                stream(model.config.seed, "eval"),
            )
        curve = norm_sweep(model.spec, model.params, anchor, dirs, radii)
        write_series_csv(out, [[r, repr(v), f"{name}:{mode}"] for r, v in zip(radii, curve)])
    elif kind == "smoothness":
        side = item.get("side", 16)
        pools = item.get("pool_sizes", [2, 3, 4, 16])
        n = item.get("n", 1000)
        rng = stream(model.config.seed, "eval")
        sets = {f"pool{p}": make_smoothness(n, side, p, rng) for p in pools}
        scores = {
            k: score_logdensity(model.spec, model.params, v) for k, v in sets.items()
        }
        scores["id_test"] = score_logdensity(model.spec, model.params, model.bundle.id_test.features)
        edges, counts = density_histogram(scores, bins=item.get("bins", 40))
        centers = 0.5 * (edges[:-1] + edges[1:])
        rows = []
        for series, cnt in sorted(counts.items()):
            rows.extend([[repr(c), int(v), series] for c, v in zip(centers, cnt)])
        write_series_csv(out, rows)
    elif kind == "ascend":
        n_points = item.get("n_points", 16)
        steps = item.get("steps", 100)
        lr = item.get("lr", 0.01)
        energy = make_energy_fn(model.spec, model.params)
        rows = []
        for i, x0 in enumerate(model.bundle.id_test.features[:n_points]):
            traj = likelihood_ascent(energy, x0, steps, lr)
            rows.extend([[t, repr(lp), f"point{i}"] for t, lp in enumerate(traj.logdensity)])
        write_series_csv(out, rows)
    else:
        raise ConfigError(f"unknown analysis kind {kind!r}")
