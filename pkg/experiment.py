"""End-to-end experiment: data, model variants, metric stages, artifacts.

Output layout::

    <out>/results.json
    <out>/checkpoints/<variant>.json
    <out>/series/*.csv
    <out>/tensorboard/<variant>/   (when enabled)
"""
import json
from pathlib import Path

from torch.utils.tensorboard import SummaryWriter

import eval as stages
from config import derive_seed
from datasets.blobs import gen_blobs, split_dataset
from datasets.tabular import load_csv
from errors import LowRankError, StageError
from models import classifier
from models.lr_layer import LRLayerState, LRRegularizer
from models.utils import load_checkpoint, save_checkpoint
from train_classifier import sgd_train

RESULTS_FORMAT_VERSION = 1
METRIC_STAGES = ("clean", "spectrum", "attacks", "min_perturbation", "noise", "cushion", "compression")
# Metric toggles in the config that gate each stage; "clean" always runs.
STAGE_TOGGLES = {
    "spectrum": "spectrum",
    "attacks": "attacks",
    "min_perturbation": "min_perturbation",
    "noise": "noise",
    "cushion": "cushion",
    "compression": "compression",
}


def _stage(name, fn, *args, log=False, **kwargs):
    if log:
        print(f"[stage] {name}")
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except (LowRankError, ValueError, RuntimeError, OSError, KeyError) as e:
        raise StageError(name, e) from e


def load_data(cfg):
    spec = cfg.dataset
    if spec.kind == "csv":
        data = load_csv(spec.path)
    else:
        data = gen_blobs(
            spec.classes, spec.dim, spec.n_per_class, spec.separation, derive_seed(cfg.seed, "data")
        )
    return split_dataset(data, spec.test_fraction, derive_seed(cfg.seed, "split"))


def default_rank(width):
    return max(1, width // 8)


def _lr_state(cfg, net, tap, rank):
    width = net.layers[tap].out_dim
    rank = min(rank, width - 1)
    spec = cfg.lr_layer
    return LRLayerState.create(
        width,
        rank,
        tap,
        lambda1=spec.lambda1,
        lambda2=spec.lambda2,
        w_learning_rate=spec.w_learning_rate,
        projection_period=cfg.train.projection_period,
        backend=spec.backend,
        nystrom_cfg=cfg.nystrom_config(rank, width),
    )


def target_rank(cfg, net):
    if cfg.lr_layer.target_rank is not None:
        return cfg.lr_layer.target_rank
    return default_rank(net.layers[net.tap_index].out_dim)


def build_variant(name, cfg, data_dim, class_count):
    """Untrained network and LR states for one variant; every variant shares the same init."""
    init_seed = derive_seed(cfg.seed, "init")
    net = classifier.build_mlp(
        data_dim, cfg.network.hidden, class_count, tap_index=cfg.network.tap_index, seed=init_seed
    )
    rank = target_rank(cfg, net)
    if name == "N-LR":
        return net, []
    if name == "Bottle-LR":
        return classifier.insert_bottleneck(net, net.tap_index, rank, seed=init_seed), []
    states = [_lr_state(cfg, net, net.tap_index, rank)]
    if name == "2-LR":
        second = cfg.lr_layer.second_tap
        if second is None:
            second = net.tap_index - 1
        if not 0 <= second < net.tap_index:
            raise ValueError(f"2-LR needs a second tap before layer {net.tap_index}, got {second}")
        width = net.layers[second].out_dim
        second_rank = cfg.lr_layer.second_rank or default_rank(width)
        states.insert(0, _lr_state(cfg, net, second, second_rank))
    return net, states


def train_variant(name, cfg, train, out_dir):
    net, states = build_variant(name, cfg, train.dim, train.class_count)
    hooks = [LRRegularizer(state) for state in states]
    writer = SummaryWriter(str(out_dir / "tensorboard" / name)) if cfg.tensorboard else None
    try:
        net, history = sgd_train(net, train, cfg.train_config(), hooks, writer, cfg.verbose)
    finally:
        if writer is not None:
            writer.close()
    return stages.ModelVariant(name=name, net=net, lr_states=[h.state for h in hooks], history=history)


def _checkpoint_path(cfg, name, out_dir, reuse):
    if name in cfg.checkpoints:
        return Path(cfg.checkpoints[name])
    path = out_dir / "checkpoints" / f"{name}.json"
    if reuse and path.exists():
        return path
    return None


def prepare_variants(cfg, train, out_dir, force_train=False):
    """Load each variant from its checkpoint when one is configured (or reusable); train the rest."""
    variants = []
    for name in cfg.variants:
        path = _checkpoint_path(cfg, name, out_dir, reuse=not force_train)
        if path is not None:
            net, states = load_checkpoint(path)
            if net.input_dim != train.dim or net.class_count != train.class_count:
                raise ValueError(f"checkpoint {path} does not match the dataset dimensions")
            variants.append(stages.ModelVariant(name=name, net=net, lr_states=states, trained=False))
            continue
        variant = train_variant(name, cfg, train, out_dir)
        save_checkpoint(out_dir / "checkpoints" / f"{name}.json", variant.net, variant.lr_states)
        variants.append(variant)
    return variants


def write_results(results, path):
    """Sorted keys and repr floats: the same results always produce the same bytes."""
    path = Path(path)
    path.parent.mkdir(exist_ok=True, parents=True)
    path.write_text(json.dumps(results, sort_keys=True, indent=1) + "\n")
    return path


def run_experiment(cfg, requested=METRIC_STAGES, force_train=True):
    """Run the requested metric stages on every configured variant.

    Stage failures surface as ``StageError`` carrying the stage name. Returns
    the results dict that was written to ``<out>/results.json``.
    """
    unknown = sorted(set(requested) - set(METRIC_STAGES))
    if unknown:
        raise ValueError(f"unknown stages {unknown}, expected a subset of {METRIC_STAGES}")
    out_dir = Path(cfg.output_dir)
    series_dir = out_dir / "series"
    verbose = cfg.verbose
    train, test = _stage("data", load_data, cfg, log=verbose)
    variants = _stage("train", prepare_variants, cfg, train, out_dir, force_train, log=verbose)
    by_name = {v.name: v for v in variants}

    def enabled(stage):
        return stage in requested and (stage not in STAGE_TOGGLES or getattr(cfg.metrics, STAGE_TOGGLES[stage]))

    results = {
        "format_version": RESULTS_FORMAT_VERSION,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "dataset": {
            "name": train.name,
            "dim": train.dim,
            "class_count": train.class_count,
            "n_train": len(train),
            "n_test": len(test),
        },
        "variants": {v.name: v.summary() for v in variants},
        "stages": [s for s in METRIC_STAGES if enabled(s)],
    }
    attack_cfgs = cfg.attack_configs()
    rank = target_rank(cfg, build_variant("N-LR", cfg, train.dim, train.class_count)[0])

    if enabled("clean"):
        results["clean"] = _stage("clean", stages.clean_stage, variants, test, log=verbose)
    if enabled("spectrum"):
        results["spectrum"] = _stage(
            "spectrum", stages.spectrum_stage, variants, test, rank, series_dir, log=verbose
        )
    if enabled("attacks"):
        source = by_name.get("N-LR") if cfg.metrics.black_box else None
        results["attacks"] = _stage(
            "attacks",
            stages.attack_stage,
            variants,
            test,
            attack_cfgs,
            cfg.sweep_epsilons,
            series_dir,
            source=source,
            curves=cfg.metrics.curves,
            propagation=cfg.metrics.propagation,
            verbose=verbose,
            log=verbose,
        )
    if enabled("min_perturbation"):
        results["min_perturbation"] = _stage(
            "min_perturbation",
            stages.min_perturbation_stage,
            variants,
            test,
            attack_cfgs,
            cfg.search,
            derive_seed(cfg.seed, "attack"),
            verbose=verbose,
            log=verbose,
        )
    if enabled("noise"):
        results["noise"] = _stage(
            "noise",
            stages.noise_stage,
            variants,
            test,
            cfg.noise_config(),
            series_dir,
            propagation=cfg.metrics.propagation,
            log=verbose,
        )
    if enabled("cushion"):
        results["cushion"] = _stage("cushion", stages.cushion_stage, variants, test, series_dir, log=verbose)
    if enabled("compression"):
        results["compression"] = _stage(
            "compression",
            stages.compression_stage,
            variants,
            train,
            test,
            cfg.compression.dims,
            cfg.max_margin_config(),
            series_dir,
            posthoc_rank=rank if cfg.metrics.posthoc else None,
            attack_cfg=attack_cfgs[0] if cfg.metrics.attacks and attack_cfgs else None,
            taps=cfg.compression.taps,
            log=verbose,
        )

    _stage("write", write_results, results, out_dir / "results.json", log=verbose)
    return results
