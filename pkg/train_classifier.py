"""SGD training of a classifier with optional LR-layer hooks."""
import argparse
import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import torch
import tqdm

from datasets.blobs import gen_blobs, split_dataset
from models import classifier
from models.utils import accuracy, save_checkpoint

# Fractions of the run at which the rate drops by 10x (0.1 -> 0.01 -> 0.001).
SCHEDULE_MILESTONES = (0.43, 0.71)


def default_schedule(epochs, base_rate=0.1):
    schedule = [(0, base_rate)]
    for i, fraction in enumerate(SCHEDULE_MILESTONES, start=1):
        epoch = int(round(fraction * epochs))
        if epoch > schedule[-1][0]:
            schedule.append((epoch, base_rate / 10**i))
    return schedule


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr_schedule: Optional[List[Tuple[int, float]]] = None
    pretrain_epochs: int = 5
    projection_period: int = 10
    rng_seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_schedule is None:
            self.lr_schedule = default_schedule(self.epochs)
        self.lr_schedule = [(int(e), float(r)) for e, r in self.lr_schedule]
        epochs = [e for e, _ in self.lr_schedule]
        if not epochs or epochs[0] != 0 or epochs != sorted(set(epochs)):
            raise ValueError("lr_schedule epochs must start at 0 and be strictly ascending")

    def rate_at(self, epoch):
        rate = self.lr_schedule[0][1]
        for start, r in self.lr_schedule:
            if epoch >= start:
                rate = r
        return rate


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float
    rate: float
    loss_c: Optional[float] = None
    loss_n: Optional[float] = None


def sgd_train(net, data, cfg, lr_hooks: Sequence = (), writer=None, verbose=False):
    """Plain SGD (no momentum) on mean cross-entropy.

    ``lr_hooks`` are called on their tap activations every batch once
    ``cfg.pretrain_epochs`` have passed; each returns the gradient it adds at
    its tap and updates its own parameters. Returns a trained copy of ``net``
    and one ``EpochRecord`` per epoch.
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    net = net.clone()
    X, y = data.features, data.labels
    n = X.shape[0]
    generator = torch.Generator().manual_seed(cfg.rng_seed)
    history = []

    for epoch in tqdm.tqdm(range(cfg.epochs), disable=not verbose, desc="train"):
        rate = cfg.rate_at(epoch)
        hooks_active = bool(lr_hooks) and epoch >= cfg.pretrain_epochs
        order = torch.randperm(n, generator=generator)
        total_loss, correct = 0.0, 0
        lr_losses = []

        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            Xb, yb = X[idx], y[idx]

            activations, logits = classifier.forward_with_taps(net, Xb)
            extra = None
            if hooks_active:
                extra = {}
                for hook in lr_hooks:
                    g = hook(activations[hook.tap_index], rate)
                    extra[hook.tap_index] = extra.get(hook.tap_index, 0) + g
                    lr_losses.append((hook.last.loss_c, hook.last.loss_n))

            loss, grads = classifier.loss_and_grads(net, Xb, yb, extra)
            correct += int((torch.argmax(logits, dim=1) == yb).sum())
            total_loss += loss * len(idx)
            classifier.apply_gradients(net, grads, rate)

        record = EpochRecord(epoch=epoch, loss=total_loss / n, accuracy=correct / n, rate=rate)
        if lr_losses:
            record.loss_c = sum(c for c, _ in lr_losses) / len(lr_losses)
            record.loss_n = sum(v for _, v in lr_losses) / len(lr_losses)
        history.append(record)

        if writer is not None:
            writer.add_scalar("Loss/train", record.loss, epoch)
            writer.add_scalar("Accuracy/train", record.accuracy, epoch)
            writer.add_scalar("LR/rate", rate, epoch)
            if record.loss_c is not None:
                writer.add_scalar("LR/loss_c", record.loss_c, epoch)
                writer.add_scalar("LR/loss_n", record.loss_n, epoch)
        if verbose:
            lr_part = f"   L_c: {record.loss_c:.4f}   L_n: {record.loss_n:.4f}" if lr_losses else ""
            print(
                f"[{epoch + 1}/{cfg.epochs}] Loss: {record.loss:.4f}   Acc: {record.accuracy * 100:.1f}%"
                + lr_part
            )

    return net, history


def evaluate(net, data):
    """Mean loss and accuracy of ``net`` on ``data``."""
    logits = classifier.forward_with_taps(net, data.features)[1]
    loss = classifier.cross_entropy(logits, data.labels).item()
    return loss, accuracy(torch.argmax(logits, dim=1), data.labels, net.class_count)


def main():
    parser = argparse.ArgumentParser(description="Train a plain MLP on Gaussian blobs")
    parser.add_argument("--classes", type=int, default=8)
    parser.add_argument("--dim", type=int, default=64)
    parser.add_argument("--n-per-class", type=int, default=400)
    parser.add_argument("--separation", type=float, default=6.0)
    parser.add_argument("--hidden", type=int, nargs="+", default=[64, 32])
    parser.add_argument("--epochs", type=int, default=30)
    parser.add_argument("--batch-size", type=int, default=64)
    parser.add_argument("--seed", type=int, default=1, help="random seed (default: 1)")
    parser.add_argument("--save-model", default=None, help="checkpoint path")
    args = parser.parse_args()

    data = gen_blobs(args.classes, args.dim, args.n_per_class, args.separation, args.seed)
    train, test = split_dataset(data, 0.25, args.seed)
    net = classifier.build_mlp(args.dim, args.hidden, args.classes, seed=args.seed)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, rng_seed=args.seed)
    net, history = sgd_train(net, train, cfg, verbose=True)

    loss, acc = evaluate(net, test)
    print(f"\nTest set: Average loss: {loss:.4f}, Accuracy: {acc * 100:.1f}%\n")
    if args.save_model:
        Path(args.save_model).parent.mkdir(exist_ok=True, parents=True)
        save_checkpoint(args.save_model, net)
        print(json.dumps({"checkpoint": args.save_model}))


if __name__ == "__main__":
    main()
