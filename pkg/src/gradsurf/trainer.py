"""Per-cloud optimization loop."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import TrainConfig
from .errors import ConfigInvalid, NonFiniteLoss
from .field import FieldNetwork, init_geometric, load_checkpoint, save_checkpoint
from .geometry import PointCloud, build_index, multiscale_offsets, neighbor_distance, sample_queries
from .losses import LossBreakdown, total_loss
from .seeding import torch_seed

log = logging.getLogger(__name__)

ASSUMPTIONS = {
    "optimizer": "Adam (betas 0.9/0.999, eps 1e-8)",
    "lr_schedule": "cosine decay from learning_rate to lr_final over `iterations`",
    "query_resampling": "fresh query batch every iteration, seed folded with the step index",
    "grad_clip": "global L2 norm",
}


@dataclass
class TrainReport:
    history: list = field(default_factory=list)
    seconds: float = 0.0
    checkpoint_path: Optional[str] = None
    degenerate_total: int = 0
    start_step: int = 0
    shard_count: int = 1
    assumptions: dict = field(default_factory=lambda: dict(ASSUMPTIONS))

    @property
    def final(self) -> Optional[LossBreakdown]:
        return self.history[-1] if self.history else None


def learning_rate(config: TrainConfig, step: int) -> float:
    if config.lr_schedule == "constant" or config.iterations <= 1:
        return config.learning_rate
    t = min(step, config.iterations) / config.iterations
    return config.lr_final + 0.5 * (config.learning_rate - config.lr_final) * (1.0 + math.cos(math.pi * t))


def _make_optimizer(net, config: TrainConfig):
    return torch.optim.Adam(net.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)


def _optimizer_arrays(opt, net) -> dict:
    m, v = [], []
    for p in net.parameters():
        st = opt.state.get(p, {})
        m.append(st["exp_avg"].reshape(-1) if st else torch.zeros(p.numel(), dtype=p.dtype))
        v.append(st["exp_avg_sq"].reshape(-1) if st else torch.zeros(p.numel(), dtype=p.dtype))
    return {"adam_m": torch.cat(m).detach().numpy(), "adam_v": torch.cat(v).detach().numpy()}


def _restore_optimizer(opt, net, arrays: dict, adam_step: int):
    if adam_step <= 0 or "adam_m" not in arrays:
        return
    off = 0
    for p in net.parameters():
        n = p.numel()
        opt.state[p] = {
            "step": torch.tensor(float(adam_step)),
            "exp_avg": torch.from_numpy(arrays["adam_m"][off:off + n].copy()).reshape(p.shape).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(arrays["adam_v"][off:off + n].copy()).reshape(p.shape).to(p.dtype),
        }
        off += n


def _checkpoint(path, net, step, opt, config: TrainConfig, header: dict):
    head = {"trainer.seed": config.seed, "adam_step": step, **header}
    save_checkpoint(path, net, step=step, header=head, extra_arrays=_optimizer_arrays(opt, net))
    return str(path)


def fit(cloud: PointCloud, config: TrainConfig, out_dir=None, net: Optional[FieldNetwork] = None,
        start_step: int = 0, optimizer_arrays: Optional[dict] = None, header: Optional[dict] = None,
        log_every: int = 0):
    """Overfit a field to one (normalized) cloud. Returns (network, TrainReport).

    With `out_dir`, writes `losses.csv`, periodic `checkpoint_XXXXXX.bin` files and a
    final `checkpoint.bin`.
    """
    config.validate(len(cloud))
    if start_step < 0 or start_step > config.iterations:
        raise ConfigInvalid(f"start step {start_step} outside [0, {config.iterations}]")
    header = dict(header or {})
    t0 = time.perf_counter()
    if net is None:
        net = init_geometric(config.field, rng_seed=torch_seed(config.seed, "init"))
    opt = _make_optimizer(net, config)
    if optimizer_arrays is not None:
        _restore_optimizer(opt, net, optimizer_arrays, start_step)
    index = build_index(cloud.points)
    sigmas = neighbor_distance(index, config.xi)
    params = list(net.parameters())
    report = TrainReport(start_step=start_step)

    csv = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv = open(out_dir / "losses.csv", "w")
        csv.write(",".join(LossBreakdown.CSV_HEADER) + "\n")
    try:
        for step in range(start_step, config.iterations):
            lr = learning_rate(config, step)
            for group in opt.param_groups:
                group["lr"] = lr
            batch = sample_queries(cloud, index, config.batch_points, config.xi, config.seed,
                                   sigmas=sigmas, step=step)
            if config.terms.v:
                batch.cache["offsets"] = multiscale_offsets(batch.queries, index, config.scales)
            breakdown, tape = total_loss(net, cloud, batch, config.weights, config.scales,
                                         config.terms, index=index)
            if not breakdown.is_finite():
                raise NonFiniteLoss(step, breakdown)
            opt.zero_grad(set_to_none=False)
            if tape.loss.requires_grad:
                tape.loss.backward()
            if config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
            opt.step()
            report.history.append(breakdown)
            report.degenerate_total += breakdown.degenerate_gradient_count
            if csv is not None:
                csv.write(breakdown.csv_row(step) + "\n")
            done = step + 1
            if out_dir is not None and config.checkpoint_every and done % config.checkpoint_every == 0:
                _checkpoint(out_dir / f"checkpoint_{done:06d}.bin", net, done, opt, config, header)
            if log_every and done % log_every == 0:
                log.info("step %d total %.5f sd %.5f d %.5f n %.5f v %.5f", done, breakdown.total,
                         breakdown.l_sd, breakdown.l_d, breakdown.l_n, breakdown.l_v)
    finally:
        if csv is not None:
            csv.close()
    if out_dir is not None:
        report.checkpoint_path = _checkpoint(out_dir / "checkpoint.bin", net, config.iterations, opt,
                                             config, header)
    report.seconds = time.perf_counter() - t0
    return net, report


def resume(checkpoint_path, config: TrainConfig, cloud: PointCloud, out_dir=None, header=None):
    """Continue training from a checkpoint up to `config.iterations`."""
    ckpt = load_checkpoint(checkpoint_path, expect=config.field)
    net = ckpt.network()
    head = {k: v for k, v in ckpt.header.items() if k.startswith("norm.")}
    head.update(header or {})
    return fit(cloud, config, out_dir=out_dir, net=net, start_step=ckpt.step,
               optimizer_arrays=ckpt.arrays, header=head)


def parameters_equal(a: FieldNetwork, b: FieldNetwork) -> bool:
    return bool(np.array_equal(a.flat_parameters().numpy(), b.flat_parameters().numpy()))
