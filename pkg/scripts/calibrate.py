"""Calibration harness: scan benchmark candidate configs and report the
margins of the directional acceptance criteria. Dev tool, not shipped API.
"""
import itertools
import sys
import time

import numpy as np

sys.path.insert(0, "src")
from cfsg.bench import benchmark_hierarchy
from cfsg.explain import hierarchy_alignment
from cfsg.losses import LossCoefficients
from cfsg.model import partition_channels
from cfsg.synthdata import SyntheticDomainConfig, generate_synthetic_domains
from cfsg.train import TrainConfig, evaluate, train, weight_sweep

H = benchmark_hierarchy()
PART = partition_channels(20, (5, 3, 2))


def run_cell(seed, fs, cs, gencfg, epochs, lr, coeffs):
    src, tgt = generate_synthetic_domains(H, PART, gencfg)
    cfg = TrainConfig(epochs=epochs, learning_rate=lr, seed=seed,
                      enable_fs=fs, enable_cs=cs, coeffs=coeffs)
    ckpt, hist = train(cfg, src)
    uni = evaluate(ckpt, tgt)["fine_acc"]
    rep = hierarchy_alignment(ckpt.tensors["classifier0.weight"], PART, H)
    out = dict(uni=uni, rho=rep.rho["all"], rho_blocks=rep.rho,
               train=hist[-1]["fine_train_acc"], src=evaluate(ckpt, src)["fine_acc"])
    if cs:
        best = weight_sweep(ckpt, tgt, 0.05)["best"]
        out["tgt"] = best["fine_acc"]
        out["lamc"] = best["lam_c"]
    else:
        out["tgt"] = uni
        out["lamc"] = None
    return out


def scan(name, gen_kw, train_kw, seeds=(0, 1)):
    epochs = train_kw.get("epochs", 30)
    lr = train_kw.get("lr", 0.02)
    coeffs = LossCoefficients(lambda_cs=train_kw.get("lcs", 1.0),
                              lambda_cd=train_kw.get("lcd", 1.0),
                              lambda_sp=train_kw.get("lsp", 1.0))
    crit7a = []  # full - fsonly
    crit7b = []  # full - csonly
    crit8 = []   # rho full - rho none
    crit9a = []  # best lam_c
    crit9b = []  # best - uniform
    t0 = time.time()
    for seed in seeds:
        gencfg = SyntheticDomainConfig(samples_per_class=100, seed=seed, **gen_kw)
        cells = {}
        for fs_, cs_ in ((True, True), (True, False), (False, True), (False, False)):
            cells[(fs_, cs_)] = run_cell(seed, fs_, cs_, gencfg, epochs, lr, coeffs)
        full, fsonly = cells[(True, True)], cells[(True, False)]
        csonly, none = cells[(False, True)], cells[(False, False)]
        crit7a.append(full["tgt"] - fsonly["tgt"])
        crit7b.append(full["tgt"] - csonly["tgt"])
        crit8.append(full["rho"] - none["rho"])
        crit9a.append(full["lamc"])
        crit9b.append(full["tgt"] - full["uni"])
        print(f"  seed {seed}: full tgt={full['tgt']:.3f} (train={full['train']:.2f}, "
              f"uni={full['uni']:.3f}, lamc={full['lamc']:.2f}) fsonly={fsonly['tgt']:.3f} "
              f"csonly={csonly['tgt']:.3f} none={none['tgt']:.3f} | "
              f"rho full={full['rho']:+.2f} none={none['rho']:+.2f}", flush=True)
    print(f"[{name}] c7: full-fsonly={np.mean(crit7a):+.3f} full-csonly={np.mean(crit7b):+.3f} | "
          f"c8 rho_gap={np.mean(crit8):+.3f} | c9 lamc={np.mean(crit9a):.2f} "
          f"gain={np.mean(crit9b):+.3f} | {time.time()-t0:.0f}s", flush=True)


if __name__ == "__main__":
    candidates = {
        "A:weak-coarse": (dict(prototype_scales=(0.9, 0.2, 0.2), noise_std=0.3,
                               shift_scale=2.0, shift_offset=2.0, sibling_scale=1.8), {}),
        "B:tiny-coarse-strong-atom": (dict(prototype_scales=(0.7, 0.15, 0.15), noise_std=0.4,
                                           shift_scale=2.0, shift_offset=2.0, sibling_scale=2.2), {}),
        "C:strong-fs-coeffs": (dict(prototype_scales=(0.9, 0.2, 0.2), noise_std=0.3,
                                    shift_scale=2.0, shift_offset=2.0, sibling_scale=1.8),
                               dict(lcs=2.0, lcd=2.0, lsp=2.0)),
        "D:no-atom-weak-coarse": (dict(prototype_scales=(1.0, 0.3, 0.3), noise_std=0.3,
                                       shift_scale=2.0, shift_offset=2.0, sibling_scale=0.0), {}),
    }
    for name, (gen_kw, train_kw) in candidates.items():
        print(f"=== {name}", flush=True)
        scan(name, gen_kw, train_kw)
