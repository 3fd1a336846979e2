"""Run the numerical self-check under every ablation flag set, attention reading and stage-2 mode.

    python scripts/selfcheck_matrix.py
"""
import itertools
import sys

from shadowfree.config import RunConfig
from shadowfree.selfcheck import run_checks

FLAG_SETS = {
    "full": (True, True, True),
    "w/o refinement": (True, True, False),
    "only convnext unet": (True, False, False),
    "only dwt-ffc": (False, True, False),
}


def main():
    failures = 0
    for (name, (unet, dwt, refine)), variant, joint in itertools.product(
            FLAG_SETS.items(), ("matrix", "elementwise"), (True, False)):
        cfg = RunConfig()
        cfg.model.enable_unet_branch, cfg.model.enable_dwtffc_branch, cfg.model.enable_refiner = unet, dwt, refine
        cfg.model.ffa_variant, cfg.schedule.stage2_joint = variant, joint
        bad = [r.name for r in run_checks(cfg) if not r.passed]
        failures += bool(bad)
        print(f"{'FAIL' if bad else 'PASS'}  {name:20s} {variant:11s} joint={joint!s:5s} {' '.join(bad)}", flush=True)
    sys.exit(1 if failures else 0)


if __name__ == "__main__":
    main()
