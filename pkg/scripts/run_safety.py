"""Safety-style sweep: baseline, DIRECTOR grid, guided decoders and the frozen-LM ablation."""
import argparse
import csv
import sys
from dataclasses import asdict

from director.experiments import SafetyConfig, run_safety


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--csv", help="write every row here")
    args = ap.parse_args(argv)
    out = run_safety(SafetyConfig(seed=args.seed), log=lambda m: print(m, file=sys.stderr))

    print(f"{'strategy':<10}{'gt':>6}{'gi':>6}{'delta':>7}{'acc':>7}{'F1':>8}{'bad':>7}{'ms/ex':>9}")
    for r in out.rows:
        print(f"{r.strategy:<10}{r.gamma_train:6g}{r.gamma_infer:6g}{r.delta:7g}{r.class_acc:7.2f}"
              f"{r.gen_f1:8.3f}{r.bad_rate:7.2f}{r.sec_per_ex * 1e3:9.2f}")
    b = out.best
    print(f"best: gt {b.gamma_train:g} gi {b.gamma_infer:g} delta {b.delta:g}; frozen LM acc {out.frozen.class_acc:.2f}"
          f" (core unchanged {out.frozen_core_identical})")
    print("off-candidate deviation " + ", ".join(f"delta {d:g}: {v:.4f}" for d, v in out.deviation.items()))
    print(f"eval classifier acc {out.clf_accuracy:.2f}, detector agreement {out.clf_detector_agreement:.2f}; "
          f"{out.seconds:.0f} s")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(asdict(out.rows[0])))
            w.writeheader()
            w.writerows(asdict(r) for r in out.rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
