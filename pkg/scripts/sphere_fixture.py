"""Clean-sphere normal estimation: fit, aggregate normals, score against analytic normals."""
from dataclasses import dataclass

from common import finish, parse_config, start
from gradsurf.config import desk_config
from gradsurf.evaluation import evaluate_normals
from gradsurf.geometry import normalize
from gradsurf.inference import infer_normals
from gradsurf.synthetic import SyntheticShape
from gradsurf.trainer import fit


@dataclass
class SphereConfig:
    points: int = 5000
    iterations: int = 5000
    seed: int = 0
    threads: int = 1
    out: str = "runs/sphere"


def main():
    cfg = parse_config(SphereConfig, __doc__)
    out, t0 = start(cfg)
    cloud, _ = normalize(SyntheticShape("sphere").cloud(cfg.points, seed=cfg.seed))
    net, report = fit(cloud, desk_config(iterations=cfg.iterations, seed=cfg.seed).train)
    est = infer_normals(net, cloud, seed=cfg.seed)
    rep = evaluate_normals(est.normals, cloud.gt_normals)
    rep.write(out)
    pgp = {int(t): fo for t, fo, _ in rep.pgp if t in (10, 30, 90)}
    finish(out, cfg, {"rmse_oriented": rep.rmse_oriented, "rmse_unoriented": rep.rmse_unoriented,
                      "pgp_oriented": pgp, "train_seconds": round(report.seconds, 1)}, t0)


if __name__ == "__main__":
    main()
