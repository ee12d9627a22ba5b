"""Per-example latency and guide-call counts for baseline, DIRECTOR, FUDGE and PACER."""
import argparse
import sys

from director.experiments import SafetyConfig, run_safety, run_speed


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--prompts", type=int, default=20)
    ap.add_argument("--repetitions", type=int, default=3)
    ap.add_argument("--top-k", type=int, default=10)
    args = ap.parse_args(argv)
    # models come from a trimmed safety run; the guided decoders are rerun below anyway
    cfg = SafetyConfig(seed=args.seed, guided_baselines=False, gamma_train_grid=(0.2,), delta_grid=(1.0,))
    models = run_safety(cfg, log=lambda m: print(m, file=sys.stderr), keep_models=True).models
    res = run_speed(models, n_prompts=args.prompts, repetitions=args.repetitions, top_k=args.top_k, pacer=True)
    base = res["baseline"].sec_per_ex
    print(f"{'strategy':<10}{'ms/ex':>9}{'x base':>8}{'calls/ex':>10}")
    for name, r in res.items():
        print(f"{name:<10}{r.sec_per_ex * 1e3:9.2f}{r.sec_per_ex / base:8.2f}{r.guide_calls_per_ex:10.1f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
