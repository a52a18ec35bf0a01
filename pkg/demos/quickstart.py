"""Generate phantoms, train a small decoder-only model, evaluate it.

Runs in a couple of minutes on one core.  Everything lands in ./demo_run.

    python demos/quickstart.py
"""

from pathlib import Path

from vxf.config import RunConfig
from vxf.run import run_eval, train

out = Path("demo_run")
cfg = RunConfig(
    configuration="decoder_only",
    crop=[16, 16, 16],
    base_channels=4,
    depth=2,
    d_dec=32,
    num_queries=6,
    decoder_heads=2,
    steps=150,
    lr=3e-3,
    n_train=8,
    n_val=2,
    log_every=25,
    out_dir=str(out / "model"),
)

summary = train(cfg)
print(f"trained {summary['steps_done']} steps in {summary['seconds']:.0f}s, final loss {summary['final_loss']:.3f}")

report = run_eval(cfg, out / "model", out / "metrics.json")
for k, row in report["per_class"].items():
    hd = "n/a" if row["hd"] is None else f"{row['hd']:.1f}"
    print(f"class {k}: dice {row['dice']:.3f}  hd {hd}")
print("per-iteration mean dice:", ", ".join(f"{s}={v:.3f}" for s, v in
                                          zip(report["c2f_dice"]["stages"], report["c2f_dice"]["mean"])))
