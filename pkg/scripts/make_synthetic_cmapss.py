#!/usr/bin/env python3
"""Generate synthetic run-to-failure files in the 26-column turbofan layout.

Writes train_<stem>.txt, test_<stem>.txt and RUL_<stem>.txt into --out so the
full ingest/train/evaluate pipeline can run without the real dataset. The
--regime-shift knob biases the operating-condition columns, which is handy for
producing a deliberately out-of-distribution test file.
"""

import argparse
from pathlib import Path

from rulens.synthetic import write_synthetic_dataset


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("data/synth"),
                    help="output directory (default: %(default)s)")
    ap.add_argument("--train-units", type=int, default=12)
    ap.add_argument("--test-units", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--min-len", type=int, default=120,
                    help="shortest unit life in cycles")
    ap.add_argument("--max-len", type=int, default=260,
                    help="longest unit life in cycles")
    ap.add_argument("--regime-shift", type=float, default=0.0,
                    help="offset added to the operating settings; nonzero "
                         "values emulate a different flight regime")
    ap.add_argument("--noise", type=float, default=0.3,
                    help="sensor noise scale")
    ap.add_argument("--stem", default="synth",
                    help="file-name stem (default: %(default)s)")
    args = ap.parse_args(argv)

    paths = write_synthetic_dataset(
        args.out, n_train_units=args.train_units, n_test_units=args.test_units,
        seed=args.seed, min_len=args.min_len, max_len=args.max_len,
        regime_shift=args.regime_shift, noise=args.noise, stem=args.stem)
    for role, path in paths.items():
        print(f"{role}: {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
