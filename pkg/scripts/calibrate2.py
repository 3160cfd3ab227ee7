"""Second calibration round: tiny coarse chunks + S_cs-dominant coefficients."""
import sys

sys.path.insert(0, "src")
sys.path.insert(0, "scripts")
from calibrate import scan

candidates = {
    "E1:tiny-coarse-lcs2.5": (dict(prototype_scales=(0.9, 0.1, 0.1), noise_std=0.3,
                                   shift_scale=2.0, shift_offset=2.0, sibling_scale=0.0),
                              dict(lcs=2.5, lcd=0.3, lsp=0.3)),
    "E2:tiny-coarse-lcs1": (dict(prototype_scales=(0.9, 0.1, 0.1), noise_std=0.3,
                                 shift_scale=2.0, shift_offset=2.0, sibling_scale=0.0),
                            dict(lcs=1.0, lcd=1.0, lsp=1.0)),
    "E3:zero-coarse-lcs2.5": (dict(prototype_scales=(0.9, 0.0, 0.0), noise_std=0.3,
                                   shift_scale=2.0, shift_offset=2.0, sibling_scale=0.0),
                              dict(lcs=2.5, lcd=0.3, lsp=0.3)),
}
for name, (gen_kw, train_kw) in candidates.items():
    print(f"=== {name}", flush=True)
    scan(name, gen_kw, train_kw)
