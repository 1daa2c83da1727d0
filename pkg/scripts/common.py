"""Shared plumbing for the experiment scripts: dataclass fields become CLI flags."""
import argparse
import dataclasses
import json
import time
from pathlib import Path

import torch


def parse_config(cls, description: str):
    parser = argparse.ArgumentParser(description=description,
                                     formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    for f in dataclasses.fields(cls):
        flag = "--" + f.name.replace("_", "-")
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        if isinstance(default, bool):
            parser.add_argument(flag, action=argparse.BooleanOptionalAction, default=default, help=" ")
        elif isinstance(default, tuple):
            kind = type(default[0]) if default else str
            parser.add_argument(flag, type=kind, nargs="+", default=default, help=" ")
        else:
            parser.add_argument(flag, type=type(default), default=default, help=" ")
    args = vars(parser.parse_args())
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in args.items()})


def start(cfg):
    torch.set_num_threads(getattr(cfg, "threads", 1))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out, time.perf_counter()


def finish(out: Path, cfg, results: dict, t0: float):
    results = {"config": dataclasses.asdict(cfg), "seconds": round(time.perf_counter() - t0, 1), **results}
    (out / "results.json").write_text(json.dumps(results, indent=2) + "\n")
    print(json.dumps(results, indent=2))
