"""Noisy-sphere denoising: Chamfer-L2 to dense analytic samples before and after projection."""
from dataclasses import dataclass

from common import finish, parse_config, start
from gradsurf.config import desk_config
from gradsurf.evaluation import chamfer, corrupt
from gradsurf.geometry import normalize
from gradsurf.inference import denoise
from gradsurf.io import write_cloud
from gradsurf.synthetic import SyntheticShape
from gradsurf.trainer import fit


@dataclass
class DenoiseConfig:
    points: int = 5000
    protocol: str = "noise_med"
    iterations: int = 2000
    learning_rate: float = 1e-3
    lr_final: float = 1e-5
    rounds: int = 2
    reference_samples: int = 200_000
    seed: int = 0
    threads: int = 1
    out: str = "runs/denoise"


def main():
    cfg = parse_config(DenoiseConfig, __doc__)
    out, t0 = start(cfg)
    shape = SyntheticShape("sphere")
    clean = shape.cloud(cfg.points, seed=0)
    cloud, tf = normalize(corrupt(clean, cfg.protocol, seed=cfg.seed))
    train = desk_config(iterations=cfg.iterations, seed=cfg.seed, learning_rate=cfg.learning_rate,
                        lr_final=cfg.lr_final).train
    net, _ = fit(cloud, train)
    ref = shape.sample(cfg.reference_samples, seed=99)
    scores = {"clean": chamfer(clean.points, ref, "L2"), "noisy": chamfer(tf.inverse(cloud.points), ref, "L2")}
    moved = cloud
    for r in range(1, cfg.rounds + 1):
        moved = denoise(net, moved)
        pts = tf.inverse(moved.points)
        scores[f"round_{r}"] = chamfer(pts, ref, "L2")
        write_cloud(out / f"denoised_round{r}.ply", pts)
    reduction = {k: 1 - v / scores["noisy"] for k, v in scores.items() if k.startswith("round")}
    finish(out, cfg, {"chamfer_l2": scores, "reduction": reduction}, t0)


if __name__ == "__main__":
    main()
