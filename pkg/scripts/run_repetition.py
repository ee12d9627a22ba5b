"""Train the looping baseline LM and a repetition-label DIRECTOR, then compare Repeat@n and F1."""
import argparse
import json
import sys

from director.experiments import RepetitionConfig, run_repetition


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="write the summary here as JSON")
    args = ap.parse_args(argv)
    out = run_repetition(RepetitionConfig(seed=args.seed), log=lambda m: print(m, file=sys.stderr))

    rows = [("baseline", out.baseline)] + [(f"director gi={g:g}", r) for g, r in sorted(out.director.items())]
    if out.beam_block is not None:
        rows.append(("baseline beam+block3", out.beam_block))
    print(f"{'model':<24}{'F1':>8}" + "".join(f"{f'R@{n}':>8}" for n in range(1, 6)) + f"{'score':>8}")
    for name, r in rows:
        print(f"{name:<24}{r.f1:8.3f}" + "".join(f"{r.repeat_at_n[n]:8.2f}" for n in range(1, 6))
              + f"{r.repeat_score_5:8.2f}")
    print(f"selected gamma_infer {out.best_gamma:g}; positive label rate {out.label_positive_rate:.2f}; "
          f"{out.seconds:.0f} s")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({name: r.to_dict() for name, r in rows} | {"best_gamma": out.best_gamma}, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
