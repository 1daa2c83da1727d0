"""Loss ablation on the noisy sphere: unoriented normal RMSE per preset and seed."""
import csv
from dataclasses import dataclass

from common import finish, parse_config, start
from gradsurf.config import desk_config
from gradsurf.evaluation import corrupt, normal_rmse
from gradsurf.geometry import normalize
from gradsurf.inference import AggregationConfig, infer_normals
from gradsurf.losses import LossTerms
from gradsurf.synthetic import SyntheticShape
from gradsurf.trainer import fit


@dataclass
class AblationConfig:
    presets: tuple = ("full", "ld_only", "no_n", "no_v")
    seeds: tuple = (0, 1, 2, 3, 4)
    points: int = 5000
    iterations: int = 1000
    learning_rate: float = 1e-4
    lr_final: float = 1e-6
    threads: int = 1
    out: str = "runs/ablation"


def main():
    cfg = parse_config(AblationConfig, __doc__)
    out, t0 = start(cfg)
    clean = SyntheticShape("sphere").cloud(cfg.points, seed=0)
    table = {}
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "preset", "rmse_unoriented", "train_seconds"])
        for seed in cfg.seeds:
            cloud, _ = normalize(corrupt(clean, "noise_med", seed=seed))
            for preset in cfg.presets:
                train = desk_config(iterations=cfg.iterations, seed=seed, learning_rate=cfg.learning_rate,
                                    lr_final=cfg.lr_final, terms=LossTerms.preset(preset)).train
                net, rep = fit(cloud, train)
                est = infer_normals(net, cloud, config=AggregationConfig(query_count=train.batch_points),
                                    xi=train.xi, seed=seed)
                rmse = normal_rmse(est.normals, clean.gt_normals, oriented=False)
                table.setdefault(seed, {})[preset] = rmse
                w.writerow([seed, preset, f"{rmse:.6f}", f"{rep.seconds:.1f}"])
                fh.flush()
                print(f"seed {seed} {preset:8s} rmse_u {rmse:.5f}")
    held = sum(all(r["full"] <= v for v in r.values()) for r in table.values() if "full" in r)
    finish(out, cfg, {"rmse_unoriented": table, "full_best_in_seeds": held}, t0)


if __name__ == "__main__":
    main()
