"""Metric stages run on trained model variants.

Each stage returns a JSON-ready dict for ``results.json`` and writes its plot
series under ``series_dir``.
"""
import argparse
import json
from dataclasses import dataclass, field, replace
from typing import List

import torch
import tqdm

from datasets.tabular import load_csv
from metrics import attacks, compression, robustness
from metrics.series import AccuracyCurves, CushionExamples, emit_combined, emit_series
from models import classifier
from models.hybrid import extract_embeddings, hybrid_predict
from models.utils import accuracy, load_checkpoint
from spectral.linalg import spectrum
from train_classifier import EpochRecord, evaluate


@dataclass
class ModelVariant:
    name: str
    net: classifier.Network
    lr_states: List = field(default_factory=list)
    history: List[EpochRecord] = field(default_factory=list)
    trained: bool = True

    @property
    def tap(self):
        return self.net.tap_index

    def summary(self):
        return {
            "trained": self.trained,
            "tap_index": self.tap,
            "tap_width": self.net.layers[self.tap].out_dim,
            "parameter_count": self.net.parameter_count(),
            "lr_layers": [
                {"tap_index": s.tap_index, "target_rank": s.target_rank, "step_counter": s.step_counter}
                for s in self.lr_states
            ],
            "history": [record.__dict__.copy() for record in self.history],
        }


def clean_stage(variants, test):
    results = {}
    for v in variants:
        loss, acc = evaluate(v.net, test)
        results[v.name] = {"loss": loss, "accuracy": acc}
    return results


def spectrum_stage(variants, test, rank, series_dir):
    """Variance ratio of the tap activations on the test set, raw and mean-centered."""
    results = {}
    for v in variants:
        A = extract_embeddings(v.net, test.features)
        raw = spectrum(A)
        centered = spectrum(A, center=True)
        emit_series(raw, series_dir / f"spectrum_{v.name}.csv")
        emit_series(centered, series_dir / f"spectrum_centered_{v.name}.csv")
        r = min(rank, len(raw.singular_values))
        results[v.name] = {
            "rank": r,
            "variance_ratio_at_rank": raw.variance_ratio_at[r],
            "centered_variance_ratio_at_rank": centered.variance_ratio_at[r],
            **raw.to_dict(),
        }
    return results


def _is_sign_attack(cfg):
    return cfg.kind is not attacks.AttackKind.DEEPFOOL


def attack_stage(
    variants, test, attack_cfgs, epsilons, series_dir, source=None, curves=True, propagation=True, verbose=False
):
    """White-box accuracy per variant and attack; black-box with ``source`` crafting the inputs.

    Also records the accuracy-vs-rho sweep, how the white-box perturbations
    propagate to the tap and, for sign-gradient attacks, the instantaneous and
    cumulative accuracy curves.
    """
    X, y = test.features, test.labels
    results = {}
    for cfg in attack_cfgs:
        key = cfg.kind.value
        per_attack = {
            "config": cfg.to_dict(),
            "white_box": {},
            "black_box": {},
            "fooled_count": {},
            "mean_rho_all": {},
            "mean_rho_fooled": {},
        }
        sweeps, curve_reports, spread = {}, {}, {}
        for v in tqdm.tqdm(variants, disable=not verbose, desc=key):
            acc, found = attacks.adversarial_accuracy(v.net, v.net, X, y, cfg, return_results=True)
            fooled = [r.rho for r in found if r.fooled]
            per_attack["white_box"][v.name] = acc
            per_attack["fooled_count"][v.name] = len(fooled)
            per_attack["mean_rho_all"][v.name] = sum(r.rho for r in found) / len(found)
            per_attack["mean_rho_fooled"][v.name] = sum(fooled) / len(fooled) if fooled else None
            if propagation:
                spread[v.name] = robustness.perturbation_propagation(
                    v.net, X, torch.stack([r.x_adv for r in found])
                )
            if source is not None and source.name != v.name:
                per_attack["black_box"][v.name] = attacks.adversarial_accuracy(v.net, source.net, X, y, cfg)
            if epsilons and _is_sign_attack(cfg):
                sweeps[v.name] = attacks.epsilon_sweep(v.net, v.net, X, y, cfg, epsilons)
            if curves and _is_sign_attack(cfg):
                a_i, a_c = attacks.accuracy_curves(
                    [r.per_step_labels for r in found], classifier.predict(v.net, X).tolist()
                )
                curve_reports[v.name] = AccuracyCurves(instantaneous=a_i, cumulative=a_c)
        if spread:
            per_attack["propagation"] = {name: r.to_dict() for name, r in spread.items()}
            emit_combined(spread, series_dir / f"propagation_{key}.csv")
        if sweeps:
            per_attack["sweep"] = {
                name: [p.__dict__.copy() for p in points] for name, points in sweeps.items()
            }
            emit_combined(sweeps, series_dir / f"sweep_{key}.csv")
        if curve_reports:
            per_attack["curves"] = {name: c.__dict__.copy() for name, c in curve_reports.items()}
            emit_combined(curve_reports, series_dir / f"curves_{key}.csv")
        results[key] = per_attack
    return results


def min_perturbation_stage(variants, test, attack_cfgs, search, seed, verbose=False):
    """Smallest epsilon reaching 99% misclassification, on a seeded subsample of the test set."""
    generator = torch.Generator().manual_seed(seed)
    count = min(search.max_examples, len(test))
    idx = torch.sort(torch.randperm(len(test), generator=generator)[:count]).values
    sample = test.subset(idx)
    grid = attacks.epsilon_grid(search.grid_start, search.grid_steps)
    results = {}
    for cfg in attack_cfgs:
        if not _is_sign_attack(cfg):
            continue
        cfg = replace(cfg, max_iters=search.max_iters)
        results[cfg.kind.value] = {
            v.name: attacks.min_perturbation_search(
                v.net, sample.features, sample.labels, cfg, grid, search.bisection_steps, verbose
            ).to_dict()
            for v in variants
        }
    return results


def noise_stage(variants, test, noise_cfg, series_dir, propagation=True):
    """Accuracy under random feature noise and the input/tap perturbation ratios."""
    noisy = robustness.perturb_features(test.features, noise_cfg)
    results = {"config": {"pixel_prob": noise_cfg.pixel_prob, "sigma": noise_cfg.sigma}, "accuracy": {}}
    reports = {}
    for v in variants:
        results["accuracy"][v.name] = accuracy(classifier.predict(v.net, noisy), test.labels, v.net.class_count)
        if propagation:
            reports[v.name] = robustness.perturbation_propagation(v.net, test.features, noisy)
    if reports:
        results["propagation"] = {name: r.to_dict() for name, r in reports.items()}
        emit_combined(reports, series_dir / "propagation.csv")
    return results


def cushion_stage(variants, test, series_dir):
    """Layer cushion of every layer of every variant.

    Per layer one histogram CSV and one CSV with every example's ratio.
    """
    results = {}
    by_layer = {}
    for v in variants:
        results[v.name] = {}
        for layer in range(len(v.net.layers)):
            report = robustness.layer_cushion(v.net, test.features, layer)
            results[v.name][str(layer)] = report.to_dict()
            by_layer.setdefault(layer, {})[v.name] = report
    for layer, reports in sorted(by_layer.items()):
        emit_combined(reports, series_dir / f"cushion_layer{layer}.csv", layer=layer)
        emit_combined(
            {name: CushionExamples(r) for name, r in reports.items()},
            series_dir / f"cushion_examples_layer{layer}.csv",
            layer=layer,
        )
    return results


def _hidden_tap(net, tap):
    if not 0 <= tap < len(net.layers) - 1:
        raise ValueError(f"compression tap {tap} must index a hidden layer (0..{len(net.layers) - 2})")
    return tap


def _tap_table(variants, train, test, dims, tap, mm_cfg):
    """Compression rows of every variant at ``tap`` (None: each variant's own tap)."""
    table = compression.CompressionTable()
    usable = {}
    for v in variants:
        at = v.tap if tap is None else _hidden_tap(v.net, tap)
        width = v.net.layers[at].out_dim
        usable[v.name] = [d for d in dims if d <= width]
        table.rows += compression.compression_eval({v.name: v.net}, train, test, usable[v.name], at, mm_cfg).rows
    return table, usable


def compression_stage(
    variants, train, test, dims, mm_cfg, series_dir, posthoc_rank=None, attack_cfg=None, taps=None
):
    """Hybrid accuracy at every PCA dimension and without PCA, plus the post-hoc baseline.

    ``taps`` repeats the table at earlier layers, where the hybrid stands in for
    a larger share of the network. With ``attack_cfg`` the hybrids are also
    scored on the white-box adversarial examples that fooled their base network.
    """
    table, usable = _tap_table(variants, train, test, dims, None, mm_cfg)
    emit_series(table, series_dir / "compression.csv")
    results = {"table": table.to_dict(), "full": {}, "drop": {}, "posthoc": {}}

    for v in variants:
        full = compression.fit_hybrid(v.net, train, v.tap, None, mm_cfg)
        full_acc = accuracy(hybrid_predict(full, test.features), test.labels, v.net.class_count)
        results["full"][v.name] = full_acc
        results["drop"][v.name] = {str(d): full_acc - table.accuracy_at(v.name, d) for d in usable[v.name]}

        width = v.net.layers[v.tap].out_dim
        ranks = sorted({d for d in list(dims) + [posthoc_rank] if d is not None and d <= width})
        results["posthoc"][v.name] = {
            str(r): compression.posthoc_truncation_eval(v.net, train, test, r) for r in ranks
        }

    if taps:
        results["taps"] = {}
        for tap in taps:
            at_tap, _ = _tap_table(variants, train, test, dims, tap, mm_cfg)
            emit_series(at_tap, series_dir / f"compression_tap{tap}.csv")
            results["taps"][str(tap)] = at_tap.to_dict()

    if attack_cfg is not None:
        results["adversarial"] = {"config": attack_cfg.to_dict()}
        fixed = replace(attack_cfg, stop_mode=attacks.StopMode.FIXED_STEPS)
        for v in variants:
            found = attacks.attack_batch(v.net, test.features, test.labels, fixed)
            X_adv = torch.stack([r.x_adv for r in found])
            fooled = [r.fooled for r in found]
            # None: the base was never fooled, so there is nothing to score.
            per_dim = {}
            for d in usable[v.name]:
                if not any(fooled):
                    per_dim[str(d)] = None
                    continue
                hybrid = compression.fit_hybrid(v.net, train, v.tap, d, mm_cfg)
                per_dim[str(d)] = compression.hybrid_adversarial_eval(hybrid, X_adv, test.labels, fooled)
            results["adversarial"][v.name] = {"fooled_count": sum(fooled), "accuracy": per_dim}
    return results


def main(args):
    """Score saved checkpoints on a CSV test set and print the clean and attack numbers."""
    test = load_csv(args.data)
    variants = []
    for path in args.checkpoints:
        net, lr_states = load_checkpoint(path)
        variants.append(ModelVariant(name=str(path), net=net, lr_states=lr_states, trained=False))
    cfg = attacks.AttackConfig(epsilon=args.epsilon, alpha=args.alpha, max_iters=args.iters)

    results = {"clean": clean_stage(variants, test)}
    for v in tqdm.tqdm(variants, desc="attack"):
        acc = attacks.adversarial_accuracy(v.net, v.net, test.features, test.labels, cfg)
        results["clean"][v.name]["adversarial_accuracy"] = acc
    print(json.dumps(results, indent=2, sort_keys=True))


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("checkpoints", nargs="+", help="Checkpoint JSON files to evaluate")
    parser.add_argument("--data", required=True, help="CSV test set with a label column")
    parser.add_argument("--epsilon", type=float, default=0.03)
    parser.add_argument("--alpha", type=float, default=0.005)
    parser.add_argument("--iters", type=int, default=20)
    args = parser.parse_args()
    main(args)
