"""Model files, dataset CSVs and vector files.

Model files are JSON.  Floats are written with Python's shortest round-trip
repr, so ``load_model(save_model(net))`` is bit-identical.  A trojaned model
keeps the untouched host layers and lists its trojans in a ``trojans``
block.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .nn import (
    CLASSIFICATION,
    REGRESSION,
    BinaryStep,
    DenseLayer,
    Identity,
    Network,
    Pulse,
    Sigmoid,
    Softmax,
)
from .trojan import MULTI, SINGLE, MultiNeuronTrigger, SingleNeuronTrigger, TrojanedNetwork, TrojanSpec

FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def _activation_to_json(act):
    if isinstance(act, tuple):
        return [_activation_to_json(a) for a in act]
    if isinstance(act, BinaryStep):
        return {"kind": act.name, "threshold": act.threshold}
    if isinstance(act, Pulse):
        return {"kind": act.name, "threshold": act.threshold, "epsilon": act.epsilon}
    return {"kind": act.name}


_SIMPLE = {"sigmoid": Sigmoid, "identity": Identity, "softmax": Softmax}


def _activation_from_json(obj, where):
    if isinstance(obj, list):
        return tuple(_activation_from_json(a, where) for a in obj)
    if isinstance(obj, str):
        obj = {"kind": obj}
    if not isinstance(obj, dict) or "kind" not in obj:
        raise ModelFormatError(f"{where}: activation must be an object with a 'kind'")
    kind = obj["kind"]
    try:
        if kind in _SIMPLE:
            return _SIMPLE[kind]()
        if kind == "binary_step":
            return BinaryStep(float(obj["threshold"]))
        if kind == "pulse":
            return Pulse(float(obj["threshold"]), float(obj.get("epsilon", 0.0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"{where}: bad {kind} activation: {exc}") from exc
    raise ModelFormatError(f"{where}: unknown activation kind {kind!r}")


# ---------------------------------------------------------------------------
# networks and trojans
# ---------------------------------------------------------------------------


def layer_to_dict(layer):
    return {
        "in_dim": layer.in_dim,
        "out_dim": layer.out_dim,
        "activation": _activation_to_json(layer.activation),
        "weights": [float(v) for v in layer.weights.ravel()],
        "biases": [float(v) for v in layer.biases],
    }


def trojan_to_dict(spec):
    trig = spec.trigger
    d = {
        "insertion_layer": trig.layer,
        "kind": trig.kind,
        "trigger_weights": [float(v) for v in trig.weights],
        "thresholds": trig.thresholds(),
    }
    if trig.kind == SINGLE:
        d["epsilon"] = trig.epsilon
    else:
        d["sigma"] = trig.sigma
        d["omega_tri1"] = trig.omega_tri1
        d["omega_tri2"] = trig.omega_tri2
    d["payload_weights"] = [float(v) for v in spec.payload]
    if spec.residual is not None:
        d["payload_residual"] = [float(v) for v in spec.residual]
    d["label"] = spec.label
    return d


def model_to_dict(model):
    """JSON-ready dict for a :class:`Network` or :class:`TrojanedNetwork`."""
    net = model.host if isinstance(model, TrojanedNetwork) else model
    d = {
        "version": FORMAT_VERSION,
        "output_head": net.output_head,
        "layers": [layer_to_dict(layer) for layer in net.layers],
    }
    if isinstance(model, TrojanedNetwork):
        d["trojans"] = [trojan_to_dict(spec) for spec in model.trojans]
    return d


def dumps_model(model):
    return json.dumps(model_to_dict(model), indent=1) + "\n"


def save_model(model, path):
    path = Path(path)
    try:
        path.write_text(dumps_model(model), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write model file {path}: {exc}") from exc
    return path


def _require(obj, key, where):
    if key not in obj:
        raise ModelFormatError(f"{where}: missing field {key!r}")
    return obj[key]


def _floats(values, where):
    try:
        arr = np.array(values, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ModelFormatError(f"{where}: not a list of numbers") from exc
    if arr.ndim != 1:
        raise ModelFormatError(f"{where}: expected a flat list of numbers")
    if not np.all(np.isfinite(arr)):
        raise ModelFormatError(f"{where}: non-finite number")
    return arr


def layer_from_dict(obj, where="layer"):
    in_dim = int(_require(obj, "in_dim", where))
    out_dim = int(_require(obj, "out_dim", where))
    w = _floats(_require(obj, "weights", where), f"{where}.weights")
    b = _floats(_require(obj, "biases", where), f"{where}.biases")
    if w.size != in_dim * out_dim:
        raise ModelFormatError(f"{where}: {w.size} weights for a {out_dim}x{in_dim} matrix")
    if b.size != out_dim:
        raise ModelFormatError(f"{where}: {b.size} biases for {out_dim} neurons")
    act = _activation_from_json(_require(obj, "activation", where), f"{where}.activation")
    try:
        return DenseLayer(w.reshape(out_dim, in_dim), b, act)
    except (ValueError, TypeError) as exc:
        raise ModelFormatError(f"{where}: {exc}") from exc


def trojan_from_dict(obj, where="trojan"):
    kind = _require(obj, "kind", where)
    n = int(_require(obj, "insertion_layer", where))
    w = _floats(_require(obj, "trigger_weights", where), f"{where}.trigger_weights")
    xi = _floats(_require(obj, "payload_weights", where), f"{where}.payload_weights")
    residual = None
    if "payload_residual" in obj:
        residual = _floats(obj["payload_residual"], f"{where}.payload_residual")
        if residual.size != xi.size:
            raise ModelFormatError(f"{where}: payload_residual has {residual.size} values for {xi.size} payload weights")
    thresholds = _require(obj, "thresholds", where)
    try:
        if kind == SINGLE:
            trig = SingleNeuronTrigger(n, w, float(thresholds["theta_T"]), float(obj.get("epsilon", 0.0)))
        elif kind == MULTI:
            trig = MultiNeuronTrigger(
                n, w, float(thresholds["theta_Tri1"]), float(_require(obj, "sigma", where)),
                float(obj.get("omega_tri1", 1.0)), float(obj.get("omega_tri2", 1.0)),
            )
            for name, value in (("theta_Tri2", trig.theta_tri2), ("theta_T", trig.theta_T)):
                if name in thresholds and float(thresholds[name]) != value:
                    raise ModelFormatError(f"{where}: stored {name} {thresholds[name]!r} inconsistent with {value!r}")
        else:
            raise ModelFormatError(f"{where}: unknown trojan kind {kind!r}")
    except KeyError as exc:
        raise ModelFormatError(f"{where}: missing threshold {exc}") from exc
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"{where}: {exc}") from exc
    return TrojanSpec(trig, xi, str(obj.get("label", "")), residual)


def model_from_dict(obj):
    if not isinstance(obj, dict):
        raise ModelFormatError("model file must hold a JSON object")
    version = _require(obj, "version", "model")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model file version {version!r}")
    head = _require(obj, "output_head", "model")
    if head not in (REGRESSION, CLASSIFICATION):
        raise ModelFormatError(f"unknown output_head {head!r}")
    layers = _require(obj, "layers", "model")
    if not isinstance(layers, list) or not layers:
        raise ModelFormatError("model: 'layers' must be a non-empty list")
    try:
        net = Network(tuple(layer_from_dict(l, f"layers[{i}]") for i, l in enumerate(layers)), head)
    except ModelFormatError:
        raise
    except ValueError as exc:
        raise ModelFormatError(f"model: {exc}") from exc
    if "trojans" not in obj:
        return net
    specs = tuple(trojan_from_dict(t, f"trojans[{i}]") for i, t in enumerate(obj["trojans"]))
    try:
        return TrojanedNetwork(net, specs)
    except ValueError as exc:
        raise ModelFormatError(f"trojans: {exc}") from exc


def loads_model(text):
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise ModelFormatError(f"malformed model file at byte offset {offset}: {exc.msg}") from exc
    return model_from_dict(obj)


def load_model(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read model file {path}: {exc}") from exc
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ModelFormatError(f"{path}: not UTF-8 at byte offset {exc.start}") from exc
    try:
        return loads_model(text)
    except ModelFormatError as exc:
        raise ModelFormatError(f"{path}: {exc}") from exc


def layers_bytes(net):
    """Canonical serialisation of the layers only (for parameter-preservation checks)."""
    return json.dumps([layer_to_dict(layer) for layer in net.layers]).encode("utf-8")


# ---------------------------------------------------------------------------
# datasets and vectors
# ---------------------------------------------------------------------------


def read_vectors(path):
    """Rows of numbers; an optional header row (``x0,x1,...``) is skipped."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if lineno == 1 and row[0].strip().lower().startswith("x"):
                continue
            try:
                rows.append([float(c) for c in row])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    if not rows:
        raise ValueError(f"{path}: no vectors")
    if len({len(r) for r in rows}) != 1:
        raise ValueError(f"{path}: rows have differing lengths")
    arr = np.array(rows)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{path}: non-finite values")
    return arr


def write_vectors(path, vectors):
    vectors = np.atleast_2d(vectors)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"x{i}" for i in range(vectors.shape[1])])
        for row in vectors:
            writer.writerow([repr(float(v)) for v in row])


def read_dataset(path):
    """``(inputs, targets, mode)`` from a CSV with ``x0..,target`` or ``x0..,label``.

    Labels come back as integer class indices; targets as floats.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty dataset") from None
        body = [row for row in reader if row]
    if len(header) < 2 or header[-1] not in ("target", "label"):
        raise ValueError(f"{path}: last column must be 'target' or 'label'")
    mode = REGRESSION if header[-1] == "target" else CLASSIFICATION
    try:
        data = np.array([[float(c) for c in row] for row in body])
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from exc
    if data.ndim != 2 or data.shape[1] != len(header):
        raise ValueError(f"{path}: dataset is not rectangular")
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{path}: non-finite values")
    x, y = data[:, :-1], data[:, -1]
    if mode == CLASSIFICATION:
        if np.any(y != np.round(y)) or np.any(y < 0):
            raise ValueError(f"{path}: labels must be non-negative integers")
        y = y.astype(np.int64)
    return x, y, mode


def write_dataset(path, inputs, targets, mode):
    inputs = np.atleast_2d(inputs)
    last = "target" if mode == REGRESSION else "label"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"x{i}" for i in range(inputs.shape[1])] + [last])
        for x, t in zip(inputs, targets):
            tail = repr(float(t)) if mode == REGRESSION else str(int(t))
            writer.writerow([repr(float(v)) for v in x] + [tail])
