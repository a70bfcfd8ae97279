"""Training loop, checkpoint serialization, evaluation and prediction.

Checkpoint layout (all integers little-endian u64, payloads little-endian,
row-major):

    magic  b"CANETCKPT"
    u8     format version (currently 1)
    u64    config text length, then that many UTF-8 bytes
    repeated until end of file:
        u64    tensor name length, then that many UTF-8 bytes
        u8     element type (0 = float32, 1 = float64)
        u64    rank
        u64[]  one extent per axis
        []     payload (product of extents elements of the type above)

Tensors are stored at their native precision -- float32 weights stay
float32, the float64 normalization running statistics stay float64 -- so a
save/load round trip reproduces the model bitwise.

The config text is the flat key = value serialization of the training
configuration plus two extra keys: `step` (training steps completed) and,
once an evaluation has run, `threshold` (the adaptively selected
binarization threshold).  Tensor names are the model's parameter and
buffer names, plus `velocity/<param>` for optimizer momentum state.
"""

import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from canet.config import TrainConfig, parse_config, serialize_config
from canet.data import list_pairs, load_pair, preprocess, split_dataset
from canet.losses import total_loss
from canet.metrics import EvalReport, adaptive_threshold, confusion_counts
from canet.model import CANet, build_model
from canet.ops import sigmoid
from canet.optim import SGD, CosineSchedule
from canet.tensor import Tensor, no_grad

CKPT_MAGIC = b"CANETCKPT"
CKPT_VERSION = 1
VELOCITY_PREFIX = "velocity/"
TENSOR_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _dtype_code(name, arr):
    for code, dtype in TENSOR_DTYPES.items():
        if arr.dtype == dtype.newbyteorder("="):
            return code
    raise ValueError(f"tensor {name!r} has unsupported dtype {arr.dtype}")


# ---------------------------------------------------------------------------
# checkpoint I/O


def _read_exact(fh, n, path):
    data = fh.read(n)
    if len(data) != n:
        raise IOError(f"{path}: truncated checkpoint")
    return data


def _read_u64(fh, path):
    return struct.unpack("<Q", _read_exact(fh, 8, path))[0]


@dataclass
class Checkpoint:
    config: TrainConfig
    step: int
    threshold: float | None
    tensors: dict


def save_checkpoint(path, config, model, optimizer=None, step=0,
                    threshold=None):
    """Atomically write model/optimizer state; see module docstring."""
    extras = {"step": int(step)}
    if threshold is not None:
        extras["threshold"] = float(threshold)
    text = serialize_config(config, extras).encode("utf-8")

    entries = [(name, p.data) for name, p in model.named_parameters().items()]
    entries += list(model.named_buffers().items())
    if optimizer is not None:
        entries += [(VELOCITY_PREFIX + name, v)
                    for name, v in optimizer.velocity.items()]

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(CKPT_MAGIC)
            fh.write(bytes([CKPT_VERSION]))
            fh.write(struct.pack("<Q", len(text)))
            fh.write(text)
            for name, arr in entries:
                encoded = name.encode("utf-8")
                code = _dtype_code(name, arr)
                fh.write(struct.pack("<Q", len(encoded)))
                fh.write(encoded)
                fh.write(bytes([code]))
                fh.write(struct.pack("<Q", arr.ndim))
                for extent in arr.shape:
                    fh.write(struct.pack("<Q", extent))
                fh.write(np.ascontiguousarray(
                    arr, dtype=TENSOR_DTYPES[code]).tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise IOError(f"{path}: cannot read checkpoint ({exc})") from exc
    with fh:
        if _read_exact(fh, len(CKPT_MAGIC), path) != CKPT_MAGIC:
            raise IOError(f"{path}: not a checkpoint file")
        version = _read_exact(fh, 1, path)[0]
        if version != CKPT_VERSION:
            raise IOError(f"{path}: unsupported checkpoint version {version}")
        text = _read_exact(fh, _read_u64(fh, path), path).decode("utf-8")
        tensors = {}
        while True:
            head = fh.read(8)
            if not head:
                break
            if len(head) != 8:
                raise IOError(f"{path}: truncated checkpoint")
            name_len = struct.unpack("<Q", head)[0]
            name = _read_exact(fh, name_len, path).decode("utf-8")
            if name in tensors:
                raise IOError(f"{path}: duplicate tensor {name!r}")
            code = _read_exact(fh, 1, path)[0]
            if code not in TENSOR_DTYPES:
                raise IOError(f"{path}: unknown tensor dtype code {code}")
            wire = TENSOR_DTYPES[code]
            rank = _read_u64(fh, path)
            shape = tuple(_read_u64(fh, path) for _ in range(rank))
            count = 1
            for extent in shape:
                count *= extent
            payload = _read_exact(fh, count * wire.itemsize, path)
            arr = np.frombuffer(payload, dtype=wire).reshape(shape)
            # astype: writable copy in native byte order
            tensors[name] = arr.astype(wire.newbyteorder("="))

    config, extras = parse_config(text, extra_keys=("step", "threshold"))
    config.validate()
    step = int(extras.get("step", "0"))
    threshold = float(extras["threshold"]) if "threshold" in extras else None
    return Checkpoint(config=config, step=step, threshold=threshold,
                      tensors=tensors)


def restore_model(checkpoint, dtype=np.float32):
    """Rebuild the model and copy checkpoint tensors in; the tensor
    inventory must match the model exactly."""
    model = build_model(checkpoint.config.model, dtype)
    params = model.named_parameters()
    buffers = model.named_buffers()
    seen = set()
    for name, arr in checkpoint.tensors.items():
        if name.startswith(VELOCITY_PREFIX):
            base = name[len(VELOCITY_PREFIX):]
            if base not in params:
                raise ValueError(
                    f"checkpoint tensor {name!r} does not match any parameter"
                )
            continue
        if name in params:
            target = params[name].data
        elif name in buffers:
            target = buffers[name]
        else:
            raise ValueError(
                f"checkpoint tensor {name!r} does not match any model "
                f"parameter or buffer"
            )
        if target.shape != arr.shape:
            raise ValueError(
                f"checkpoint tensor {name!r} has extents {arr.shape}, "
                f"model expects {target.shape}"
            )
        target[...] = arr
        seen.add(name)
    for name in list(params) + list(buffers):
        if name not in seen:
            raise ValueError(f"checkpoint is missing tensor {name!r}")
    return model


def restore_optimizer(checkpoint, model):
    """SGD with momentum buffers from the checkpoint (fresh if absent)."""
    optimizer = SGD(model.named_parameters(), checkpoint.config.momentum)
    for name, arr in checkpoint.tensors.items():
        if not name.startswith(VELOCITY_PREFIX):
            continue
        base = name[len(VELOCITY_PREFIX):]
        target = optimizer.velocity[base]
        if target.shape != arr.shape:
            raise ValueError(
                f"checkpoint tensor {name!r} has extents {arr.shape}, "
                f"optimizer expects {target.shape}"
            )
        target[...] = arr
    return optimizer


def best_checkpoint_path(path):
    root, ext = os.path.splitext(path)
    return root + ".best" + (ext or ".ckpt")


# ---------------------------------------------------------------------------
# inference helpers


def forward_prob(model, net_input):
    """float32 (H, W) network input -> probability map, no gradients."""
    with no_grad():
        main, _ = model.forward(Tensor(net_input[None, None]), mode="eval")
        return sigmoid(main).data[0, 0]


def predict(model, input_mode, shape_mask, threshold):
    """Binary shape mask -> (skeleton mask, probability map)."""
    prob = forward_prob(model, preprocess(input_mode, shape_mask))
    return prob >= threshold, prob


def evaluate_ids(model, stems, examples, threshold=None,
                 aggregate="per_image"):
    """EvalReport over preprocessed (input, target) examples.

    If no threshold is given, one is selected adaptively on these images.
    """
    probs = [forward_prob(model, examples[stem][0]) for stem in stems]
    gts = [examples[stem][1] for stem in stems]
    if threshold is None:
        threshold, _ = adaptive_threshold(probs, gts, aggregate)
    counts = [confusion_counts(p >= threshold, gt)
              for p, gt in zip(probs, gts)]
    return EvalReport(list(stems), counts, threshold, aggregate)


def evaluate_checkpoint(checkpoint_path, shapes_dir, skeletons_dir,
                        threshold=None):
    checkpoint = load_checkpoint(checkpoint_path)
    model = restore_model(checkpoint)
    cfg = checkpoint.config
    stems = list_pairs(shapes_dir, skeletons_dir)
    examples = {}
    for stem in stems:
        shape, skeleton = load_pair(shapes_dir, skeletons_dir, stem)
        examples[stem] = (preprocess(cfg.input_mode, shape), skeleton)
    return evaluate_ids(model, stems, examples, threshold,
                        cfg.eval_aggregate)


# ---------------------------------------------------------------------------
# training


class Trainer:
    """Deterministic training driver for one configuration.

    Batch order is drawn from a generator seeded by (split_seed, 1), so a
    run is fully reproducible given the config.
    """

    def __init__(self, cfg, log=None):
        cfg.validate()
        self.cfg = cfg
        self.log = log if log is not None else (lambda message: None)
        stems = list_pairs(cfg.shapes_dir, cfg.skeletons_dir)
        self.train_ids, self.test_ids = split_dataset(
            stems, cfg.split_ratio, cfg.split_seed
        )
        self.model = build_model(cfg.model)
        self.optimizer = SGD(self.model.named_parameters(), cfg.momentum)
        self.schedule = CosineSchedule(cfg.total_steps, cfg.lr_max,
                                       cfg.lr_min)
        self._examples = {}
        self._queue = []
        self._batch_rng = np.random.default_rng((cfg.split_seed, 1))

    def example(self, stem):
        """(network input float32 (H, W), target bool (H, W)), cached."""
        if stem not in self._examples:
            shape, skeleton = load_pair(self.cfg.shapes_dir,
                                        self.cfg.skeletons_dir, stem)
            self._examples[stem] = (
                preprocess(self.cfg.input_mode, shape), skeleton
            )
        return self._examples[stem]

    def _next_batch(self):
        while len(self._queue) < self.cfg.batch_size:
            order = self._batch_rng.permutation(len(self.train_ids))
            self._queue.extend(self.train_ids[i] for i in order)
        batch = self._queue[:self.cfg.batch_size]
        del self._queue[:self.cfg.batch_size]
        return batch

    def train_step(self, step):
        """One optimization step; returns (loss value, lr, batch stems)."""
        stems = self._next_batch()
        pairs = [self.example(stem) for stem in stems]
        extents = {p[0].shape for p in pairs}
        if len(extents) != 1:
            raise ValueError(
                f"batch mixes image extents {sorted(extents)}: "
                f"{', '.join(stems)}"
            )
        x = Tensor(np.stack([p[0] for p in pairs])[:, None])
        target = np.stack([p[1] for p in pairs])[:, None]
        main, aux = self.model.forward(x, mode="train")
        loss = total_loss(main, aux, target, self.cfg.loss)
        value = float(loss.data)
        if not np.isfinite(value):
            raise RuntimeError(
                f"non-finite loss ({value}) at step {step} on batch "
                f"{', '.join(stems)}"
            )
        self.optimizer.zero_grad()
        loss.backward()
        lr = self.schedule.lr_at(step)
        self.optimizer.step(lr)
        return value, lr, stems

    def evaluate(self, stems, threshold=None):
        for stem in stems:
            self.example(stem)
        return evaluate_ids(self.model, stems, self._examples, threshold,
                            self.cfg.eval_aggregate)

    def run(self, early_stop_f1=None, early_stop_ids=None):
        """Train for cfg.total_steps (or until the early-stop target is
        reached), checkpointing the best split-test F1 and the final state.

        Returns a history dict with per-step (step, lr, loss) tuples,
        per-evaluation (step, threshold, mean F1) tuples, the best F1 and
        the number of steps run.
        """
        cfg = self.cfg
        losses, evals = [], []
        best_f1 = -1.0
        threshold = None
        steps_run = 0
        for step in range(cfg.total_steps):
            value, lr, _ = self.train_step(step)
            steps_run = step + 1
            losses.append((step, lr, value))
            self.log(f"step {step} lr {lr:.6f} loss {value:.6f}")
            stop = False
            if steps_run % cfg.eval_interval == 0 or steps_run == cfg.total_steps:
                report = self.evaluate(self.test_ids)
                threshold = report.threshold
                evals.append((step, report.threshold, report.mean_f1))
                self.log(
                    f"step {step} split_test_f1 {report.mean_f1:.6f} "
                    f"threshold {report.threshold:.2f}"
                )
                if report.mean_f1 > best_f1:
                    best_f1 = report.mean_f1
                    save_checkpoint(
                        best_checkpoint_path(cfg.checkpoint_path), cfg,
                        self.model, self.optimizer, steps_run,
                        report.threshold,
                    )
                if early_stop_f1 is not None:
                    ids = (early_stop_ids if early_stop_ids is not None
                           else self.train_ids)
                    target_report = self.evaluate(ids)
                    if target_report.mean_f1 >= early_stop_f1:
                        self.log(
                            f"step {step} early_stop_f1 "
                            f"{target_report.mean_f1:.6f}"
                        )
                        stop = True
            if stop:
                break
        save_checkpoint(cfg.checkpoint_path, cfg, self.model, self.optimizer,
                        steps_run, threshold)
        return {
            "losses": losses,
            "evals": evals,
            "best_f1": best_f1,
            "steps_run": steps_run,
        }


def train_from_config(cfg, log=None, early_stop_f1=None):
    trainer = Trainer(cfg, log=log)
    history = trainer.run(early_stop_f1=early_stop_f1)
    return trainer, history
