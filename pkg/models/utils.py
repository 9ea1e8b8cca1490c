import json
from pathlib import Path

import torch
import torchmetrics

from errors import CheckpointError, CheckpointVersionError
from models.classifier import Activation, BottleneckLayer, DenseLayer, Network
from models.lr_layer import LRLayerState
from spectral.linalg import DTYPE, matrix_from_json, matrix_to_json

CHECKPOINT_FORMAT_VERSION = 1


def accuracy(preds, labels, num_classes):
    preds = torch.as_tensor(preds, dtype=torch.long).reshape(-1)
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    if labels.numel() == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return torchmetrics.functional.accuracy(
        preds, labels, task="multiclass", num_classes=num_classes, average="micro"
    ).item()


def layer_to_dict(layer):
    if isinstance(layer, BottleneckLayer):
        return {"kind": "bottleneck", "factor": matrix_to_json(layer.factor)}
    return {
        "kind": "dense",
        "weights": matrix_to_json(layer.weights),
        "bias": layer.bias.tolist(),
        "activation": layer.activation.value,
    }


def layer_from_dict(d):
    if d["kind"] == "bottleneck":
        return BottleneckLayer(factor=matrix_from_json(d["factor"]))
    if d["kind"] == "dense":
        return DenseLayer(
            weights=matrix_from_json(d["weights"]),
            bias=torch.tensor(d["bias"], dtype=DTYPE),
            activation=Activation(d["activation"]),
        )
    raise CheckpointError(f"unknown layer kind {d['kind']!r}")


def network_to_dict(net, lr_states=()):
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "tap_index": net.tap_index,
        "class_count": net.class_count,
        "layers": [layer_to_dict(layer) for layer in net.layers],
    }
    if lr_states:
        payload["lr_state"] = [state.to_dict() for state in lr_states]
    return payload


def network_from_dict(payload):
    found = payload.get("format_version")
    if found != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointVersionError(CHECKPOINT_FORMAT_VERSION, found)
    try:
        layers = [layer_from_dict(d) for d in payload["layers"]]
        net = Network(
            layers=layers,
            tap_index=payload["tap_index"],
            class_count=payload.get("class_count", layers[-1].out_dim),
        )
        states = payload.get("lr_state") or []
        if isinstance(states, dict):
            states = [states]
        lr_states = [LRLayerState.from_dict(d) for d in states]
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"malformed checkpoint: {e}") from e
    return net, lr_states


def save_checkpoint(path, net, lr_states=()):
    """JSON checkpoint; floats are written with repr precision so reloads are bit-exact."""
    path = Path(path)
    path.parent.mkdir(exist_ok=True, parents=True)
    text = json.dumps(network_to_dict(net, lr_states), sort_keys=True)
    path.write_text(text)
    return path


def load_checkpoint(path):
    """Returns ``(network, lr_states)``. Nothing is returned unless the whole file parses."""
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path} is not valid JSON: {e}") from e
    if not isinstance(payload, dict):
        raise CheckpointError(f"{path} does not hold a checkpoint object")
    return network_from_dict(payload)
