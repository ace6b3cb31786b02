"""End-to-end training and prediction for the spectral-normalized GP classifier.

A model is a hidden mapping (the residual network, or the identity for the
shallow variant) composed with an output head (the random-feature GP layer,
or a plain dense layer for ablations).  Each minibatch step runs, in order:

    1. SGD-with-momentum update of all trainable parameters,
    2. spectral normalization of every residual layer (when enabled),
    3. during the precision-update epoch (default: the final one), the
       moving-average precision update using evaluation-mode features and
       the current model probabilities.

The step order is observable through the optional ``hooks`` callback.
Training is bit-reproducible: shuffling, dropout, and initialisation all
draw from independently derived streams of the config seed.

Checkpoint format (binary, version 1, bit-exact round trip):

    bytes 0..7    magic ``SNGPCKPT``
    bytes 8..11   format version, uint32 little-endian
    bytes 12..15  header length in bytes, uint32 little-endian
    header        UTF-8 JSON (sorted keys): variant tag, class count,
                  config echo, architecture description, and the array
                  manifest [name, shape] in write order
    payload       the arrays from the manifest, concatenated raw
                  little-endian float64, C order
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.special import expit, logsumexp

from .gp_layer import GpPrediction, RffGpLayer, softmax
from .linalg import RngState
from .nn import (DenseLayer, ResFfnNetwork, SgdMomentum, build_res_ffn, clamp_network,
                 normalize_network)

CHECKPOINT_MAGIC = b"SNGPCKPT"
CHECKPOINT_VERSION = 1
DIVERGENCE_LIMIT = 1e6


class TrainingDivergedError(RuntimeError):
    """Loss exceeded the divergence guard or became non-finite."""


class DenseHead:
    """Plain affine output layer for the non-GP ablations."""

    def __init__(self, in_dim: int, num_classes: int, rng: RngState):
        scale = np.sqrt(1.0 / in_dim)
        self.weight = scale * rng.normal_matrix(num_classes, in_dim)
        self.bias = np.zeros(num_classes)
        self.num_classes = num_classes
        self.in_dim = in_dim

    def logits(self, h: np.ndarray) -> np.ndarray:
        return h @ self.weight.T + self.bias


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    l2_beta: float = 0.0
    seed: int = 0
    mc_samples: int = 10
    precision_update_epoch: int | None = None  # None -> final epoch
    precision_exact: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    final_train_accuracy: float = 0.0
    wall_clock_s: float = 0.0
    seed: int = 0
    config_echo: dict = field(default_factory=dict)

    def as_text(self) -> str:
        lines = [f"seed={self.seed}",
                 f"final_train_accuracy={self.final_train_accuracy:.17g}",
                 f"wall_clock_s={self.wall_clock_s:.3f}"]
        for key in sorted(self.config_echo):
            lines.append(f"config.{key}={self.config_echo[key]}")
        for i, loss in enumerate(self.epoch_losses):
            lines.append(f"loss_epoch_{i}={loss:.17g}")
        return "\n".join(lines) + "\n"


class SngpModel:
    """Hidden mapping plus output head, with the spectral-norm toggle."""

    def __init__(self, network: ResFfnNetwork | None, head, spectral_norm_enabled: bool,
                 num_classes: int, input_dim: int | None = None):
        if network is None and input_dim is None:
            raise ValueError("identity hidden map requires an explicit input_dim")
        if num_classes < 2:
            raise ValueError("need at least two classes")
        self.network = network
        self.head = head
        self.spectral_norm_enabled = spectral_norm_enabled
        self.num_classes = num_classes
        self._input_dim = input_dim if network is None else network.input_dim
        width = self.hidden_width
        head_in = head.in_dim
        if head_in != width:
            raise ValueError(f"head expects input dim {head_in}, hidden map produces {width}")
        if head.num_classes != num_classes:
            raise ValueError("head class count disagrees with the model")

    @property
    def input_dim(self) -> int:
        return self._input_dim

    @property
    def hidden_width(self) -> int:
        return self._input_dim if self.network is None else self.network.hidden_width

    @property
    def has_gp_head(self) -> bool:
        return isinstance(self.head, RffGpLayer)

    def hidden(self, x: np.ndarray, train_mode: bool = False, rng: RngState | None = None):
        """Hidden features (batch, width) and the network tape (None for identity)."""
        x = np.asarray(x, dtype=np.float64)
        if self.network is None:
            return x, None
        return self.network.forward(x, train_mode=train_mode, rng=rng)

    def parameters(self) -> dict[str, np.ndarray]:
        params: dict[str, np.ndarray] = {}
        if self.network is not None:
            for name, arr in self.network.parameters().items():
                params[f"net.{name}"] = arr
        if self.has_gp_head:
            params["head.beta"] = self.head.beta
        else:
            params["head.w"] = self.head.weight
            params["head.b"] = self.head.bias
        return params

    def eval_logits(self, x: np.ndarray) -> np.ndarray:
        """Evaluation-mode mean logits for a (batch, d) input."""
        h, _ = self.hidden(x, train_mode=False)
        if self.has_gp_head:
            return self.head.logits(self.head.rff_features(h))
        return self.head.logits(h)


def build_sngp_model(input_dim: int, hidden_width: int, depth: int, num_classes: int,
                     seed: int, activation: str = "relu", dropout_rate: float = 0.0,
                     sn_bound: float = 0.9, spectral_norm: bool = True,
                     gp_head: bool = True, num_features: int = 1024,
                     length_scale: float = 2.0, ridge_s: float = 0.001,
                     discount_m: float = 0.999, use_layer_norm: bool = True,
                     gp_projection_dim: int | None = None,
                     identity_hidden: bool = False) -> SngpModel:
    """Convenience constructor covering the full model, its ablations, and the
    shallow (identity hidden map) variant."""
    rng = RngState(seed)
    if identity_hidden:
        network = None
        width = input_dim
    else:
        network = build_res_ffn(input_dim, hidden_width, depth, rng.derive("net"),
                                activation=activation, dropout_rate=dropout_rate,
                                sn_bound=sn_bound)
        if spectral_norm:
            # Start inside the feasible region and warm up the persisted
            # power-iteration vectors before the first training step.
            clamp_network(network)
            for _ in range(10):
                normalize_network(network)
        width = hidden_width
    if gp_head:
        head = RffGpLayer(width, num_features, num_classes, rng.derive("head"),
                          length_scale=length_scale, ridge_s=ridge_s, discount_m=discount_m,
                          use_layer_norm=use_layer_norm, projection_dim=gp_projection_dim)
    else:
        head = DenseHead(width, num_classes, rng.derive("head"))
    return SngpModel(network=network, head=head, spectral_norm_enabled=spectral_norm,
                     num_classes=num_classes, input_dim=input_dim)


def loss_and_grads(model: SngpModel, batch_x: np.ndarray, batch_y: np.ndarray,
                   l2_beta: float = 0.0, l2_scale: float = 1.0,
                   train_mode: bool = True, rng: RngState | None = None
                   ) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy (plus the scaled L2 prior on the head weights) and
    exact gradients for every trainable parameter."""
    batch_x = np.asarray(batch_x, dtype=np.float64)
    batch_y = np.asarray(batch_y, dtype=int)
    if np.any(batch_y < 0) or np.any(batch_y >= model.num_classes):
        raise ValueError("labels out of range")
    m = batch_x.shape[0]
    h, tape = model.hidden(batch_x, train_mode=train_mode, rng=rng)

    if model.has_gp_head:
        phi, gp_tape = model.head.features_with_tape(h)
        logits = model.head.logits(phi)
        head_weights = model.head.beta
    else:
        logits = model.head.logits(h)
        head_weights = model.head.weight

    # log-softmax keeps the loss exact and unbounded so the divergence guard works
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    probs = np.exp(log_probs)
    loss = float(-np.mean(log_probs[np.arange(m), batch_y]))
    if l2_beta > 0.0:
        loss += l2_beta * 0.5 * float(np.sum(head_weights**2)) / l2_scale
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss on a batch of {m} samples")

    dlogits = probs.copy()
    dlogits[np.arange(m), batch_y] -= 1.0
    dlogits /= m

    grads: dict[str, np.ndarray] = {}
    if model.has_gp_head:
        grads["head.beta"] = dlogits.T @ phi
        if l2_beta > 0.0:
            grads["head.beta"] += (l2_beta / l2_scale) * model.head.beta
        dphi = dlogits @ model.head.beta
        dh = model.head.backprop_features(gp_tape, dphi)
    else:
        grads["head.w"] = dlogits.T @ h
        if l2_beta > 0.0:
            grads["head.w"] += (l2_beta / l2_scale) * model.head.weight
        grads["head.b"] = dlogits.sum(axis=0)
        dh = dlogits @ model.head.weight

    if model.network is not None:
        for name, g in model.network.backward(tape, dh).items():
            grads[f"net.{name}"] = g
    return loss, grads


def train(model: SngpModel, points: np.ndarray, labels: np.ndarray, config: TrainConfig,
          hooks=None) -> TrainReport:
    """Run the two-phase training loop; returns the report, model updated in place.

    ``hooks(event, epoch, step)`` is invoked with events ``sgd_update``,
    ``spectral_norm`` and ``precision_update`` in the order they execute.
    """
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    n = points.shape[0]
    if n == 0:
        raise ValueError("dataset must be non-empty")
    start = time.perf_counter()
    root = RngState(config.seed)
    shuffle_rng = root.derive("shuffle")
    dropout_rng = root.derive("dropout")
    optimizer = SgdMomentum(config.learning_rate, config.momentum)
    precision_epoch = (config.epochs - 1 if config.precision_update_epoch is None
                       else config.precision_update_epoch)

    report = TrainReport(seed=config.seed, config_echo=asdict(config))
    step = 0
    for epoch in range(config.epochs):
        collect_precision = (model.has_gp_head and not config.precision_exact
                             and epoch == precision_epoch)
        if collect_precision:
            model.head.reset_precision()
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        num_batches = 0
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            bx, by = points[idx], labels[idx]
            loss, grads = loss_and_grads(model, bx, by, l2_beta=config.l2_beta,
                                         l2_scale=float(n), train_mode=True, rng=dropout_rng)
            if not np.isfinite(loss) or loss > DIVERGENCE_LIMIT:
                raise TrainingDivergedError(f"loss {loss} at epoch {epoch} step {step}")
            if hooks:
                hooks("sgd_update", epoch, step)
            optimizer.step(model.parameters(), grads)
            if model.spectral_norm_enabled and model.network is not None:
                if hooks:
                    hooks("spectral_norm", epoch, step)
                normalize_network(model.network)
            if collect_precision:
                if hooks:
                    hooks("precision_update", epoch, step)
                h_eval, _ = model.hidden(bx, train_mode=False)
                phi = model.head.rff_features(h_eval)
                probs = softmax(model.head.logits(phi))
                model.head.update_precision_minibatch(phi, probs)
            epoch_loss += loss
            num_batches += 1
            step += 1
        report.epoch_losses.append(epoch_loss / num_batches)

    if model.spectral_norm_enabled and model.network is not None and config.epochs > 0:
        # The single-iteration estimates lag the last SGD updates; finish with
        # an exact clamp so the spectral bound holds as a certificate.
        clamp_network(model.network)

    if model.has_gp_head and config.precision_exact and config.epochs > 0:
        if hooks:
            hooks("precision_update", config.epochs - 1, step)
        h_eval, _ = model.hidden(points, train_mode=False)
        phi = model.head.rff_features(h_eval)
        probs = softmax(model.head.logits(phi))
        model.head.update_precision_exact(phi, probs)

    if config.epochs > 0:
        logits = model.eval_logits(points)
        report.final_train_accuracy = float(np.mean(np.argmax(logits, axis=1) == labels))
    report.wall_clock_s = time.perf_counter() - start
    return report


# -- prediction ---------------------------------------------------------------


def predict_batch(model: SngpModel, x: np.ndarray, mc_samples: int = 10,
                  rng: RngState | None = None
                  ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized prediction: (mean logits, logit variances, probs, ds scores)."""
    x = np.asarray(x, dtype=np.float64)
    h, _ = model.hidden(x, train_mode=False)
    if model.has_gp_head:
        phi = model.head.rff_features(h)
        means = model.head.logits(phi)
        variances = model.head.predictive_variance_batch(phi)
    else:
        means = model.head.logits(h)
        variances = np.zeros_like(means)
    if np.any(variances > 0.0):
        if rng is None:
            raise ValueError("Monte Carlo averaging over logit noise requires an rng")
        if mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        sd = np.sqrt(variances)
        eps = rng.normal(mc_samples * means.size).reshape(mc_samples, *means.shape)
        probs = softmax(means[None, :, :] + sd[None, :, :] * eps).mean(axis=0)
    else:
        probs = softmax(means)
    ds = expit(np.log(model.num_classes) - logsumexp(means, axis=1))
    return means, variances, probs, ds


def predict(model: SngpModel, x: np.ndarray, mc_samples: int = 10,
            rng: RngState | None = None) -> GpPrediction:
    """Posterior prediction for a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("predict expects a single input vector")
    means, variances, probs, ds = predict_batch(model, x[None, :], mc_samples=mc_samples, rng=rng)
    return GpPrediction(mean_logits=means[0], variance_logits=variances[0],
                        probs=probs[0], uncertainty_ds=float(ds[0]))


def logit_variance_uncertainty(pred: GpPrediction) -> float:
    """Posterior logit variance as the uncertainty score (binary-case metric)."""
    return float(np.mean(pred.variance_logits))


def prob_margin_uncertainty(pred: GpPrediction) -> float:
    """1 - 2 |p - 0.5| for binary classifiers; 1 at total ambivalence, 0 when sure."""
    if pred.probs.shape[0] != 2:
        raise ValueError("probability-margin uncertainty is defined for K = 2 only")
    return float(1.0 - 2.0 * abs(pred.probs[0] - 0.5))


def margin_uncertainty_from_probs(probs: np.ndarray) -> np.ndarray:
    """Vectorized 1 - 2 |p - 0.5| over (N, 2) probability rows."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape[-1] != 2:
        raise ValueError("probability-margin uncertainty is defined for K = 2 only")
    return 1.0 - 2.0 * np.abs(probs[..., 0] - 0.5)


# -- checkpoints ---------------------------------------------------------------


def _array_manifest(model: SngpModel) -> list[tuple[str, np.ndarray]]:
    arrays: list[tuple[str, np.ndarray]] = []
    if model.network is not None:
        net = model.network
        arrays.append(("net.proj.w", net.input_projection.weight))
        arrays.append(("net.proj.b", net.input_projection.bias))
        arrays.append(("net.proj.sn_u", net.input_projection.sn_u))
        for i, blk in enumerate(net.blocks):
            arrays.append((f"net.block{i}.w", blk.layer.weight))
            arrays.append((f"net.block{i}.b", blk.layer.bias))
            arrays.append((f"net.block{i}.sn_u", blk.layer.sn_u))
    if model.has_gp_head:
        head = model.head
        arrays.append(("head.w_fixed", head.w_fixed))
        arrays.append(("head.b_fixed", head.b_fixed))
        arrays.append(("head.beta", head.beta))
        for k, p in enumerate(head.precision):
            arrays.append((f"head.precision{k}", p))
        if head.input_projection is not None:
            arrays.append(("head.input_projection", head.input_projection))
    else:
        arrays.append(("head.w", model.head.weight))
        arrays.append(("head.b", model.head.bias))
    return arrays


def save_checkpoint(model: SngpModel, path: str, variant: str = "sngp",
                    config_echo: dict | None = None) -> None:
    arrays = _array_manifest(model)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "variant": variant,
        "num_classes": model.num_classes,
        "input_dim": model.input_dim,
        "config": config_echo or {},
        "arrays": [[name, list(arr.shape)] for name, arr in arrays],
    }
    if model.network is not None:
        net = model.network
        header["network"] = {
            "hidden_width": net.hidden_width,
            "depth": net.depth,
            "activation": net.blocks[0].activation if net.blocks else "relu",
            "dropout_rate": net.blocks[0].dropout_rate if net.blocks else 0.0,
            "sn_bound": net.input_projection.sn_bound,
            "spectral_norm": model.spectral_norm_enabled,
        }
    else:
        header["network"] = None
    if model.has_gp_head:
        head = model.head
        header["head"] = {
            "kind": "gp",
            "num_features": head.num_features,
            "length_scale": head.length_scale,
            "ridge_s": head.ridge_s,
            "discount_m": head.discount_m,
            "use_layer_norm": head.use_layer_norm,
            "shared_precision": head.shared_precision,
            "projection_dim": None if head.input_projection is None
                              else head.input_projection.shape[0],
        }
    else:
        header["head"] = {"kind": "dense"}

    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(np.uint32(CHECKPOINT_VERSION).tobytes())
        f.write(np.uint32(len(header_bytes)).tobytes())
        f.write(header_bytes)
        for _, arr in arrays:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> tuple[SngpModel, dict]:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file (bad magic {magic!r})")
        version = int(np.frombuffer(f.read(4), dtype="<u4")[0])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header_len = int(np.frombuffer(f.read(4), dtype="<u4")[0])
        header = json.loads(f.read(header_len).decode("utf-8"))
        arrays: dict[str, np.ndarray] = {}
        for name, shape in header["arrays"]:
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * 8)
            arrays[name] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)

    num_classes = header["num_classes"]
    input_dim = header["input_dim"]
    net_desc = header["network"]
    if net_desc is not None:
        from .nn import ResidualBlock
        proj = DenseLayer(weight=arrays["net.proj.w"].copy(), bias=arrays["net.proj.b"].copy(),
                          sn_u=arrays["net.proj.sn_u"].copy(), sn_bound=net_desc["sn_bound"])
        blocks = []
        for i in range(net_desc["depth"]):
            layer = DenseLayer(weight=arrays[f"net.block{i}.w"].copy(),
                               bias=arrays[f"net.block{i}.b"].copy(),
                               sn_u=arrays[f"net.block{i}.sn_u"].copy(),
                               sn_bound=net_desc["sn_bound"])
            blocks.append(ResidualBlock(layer=layer, activation=net_desc["activation"],
                                        dropout_rate=net_desc["dropout_rate"]))
        network = ResFfnNetwork(proj, blocks)
        spectral_norm = net_desc["spectral_norm"]
        width = net_desc["hidden_width"]
    else:
        network = None
        spectral_norm = False
        width = input_dim

    head_desc = header["head"]
    if head_desc["kind"] == "gp":
        head = RffGpLayer.__new__(RffGpLayer)
        head.in_dim = width
        head.num_features = head_desc["num_features"]
        head.num_classes = num_classes
        head.length_scale = head_desc["length_scale"]
        head.ridge_s = head_desc["ridge_s"]
        head.discount_m = head_desc["discount_m"]
        head.use_layer_norm = head_desc["use_layer_norm"]
        head.shared_precision = head_desc["shared_precision"]
        head.input_projection = (arrays["head.input_projection"].copy()
                                 if head_desc["projection_dim"] is not None else None)
        head.w_fixed = arrays["head.w_fixed"].copy()
        head.b_fixed = arrays["head.b_fixed"].copy()
        head.beta = arrays["head.beta"].copy()
        n_prec = 1 if head.shared_precision else num_classes
        head.precision = [arrays[f"head.precision{k}"].copy() for k in range(n_prec)]
        head._factors = None
    else:
        head = DenseHead.__new__(DenseHead)
        head.weight = arrays["head.w"].copy()
        head.bias = arrays["head.b"].copy()
        head.num_classes = num_classes
        head.in_dim = width

    model = SngpModel(network=network, head=head, spectral_norm_enabled=spectral_norm,
                      num_classes=num_classes, input_dim=input_dim)
    return model, header
