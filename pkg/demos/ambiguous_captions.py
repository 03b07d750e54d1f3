"""Why the image alone is not enough: one synthetic sample, its caption and its distractors.

Run with ``python demos/ambiguous_captions.py [seed] [out_dir]``. Writes the image,
the target mask and a mask of every lesion as PGM files so they can be opened in
any viewer.
"""
import sys
from pathlib import Path

import numpy as np

from useg.data import generate_sample, rasterize, write_pgm

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 3
out = Path(sys.argv[2] if len(sys.argv) > 2 else "ambiguity_demo")
out.mkdir(parents=True, exist_ok=True)

s = generate_sample(seed, ambiguity=2)
print(f"caption: {s.caption!r}\n")
target = s.lesions[0].attrs
for i, spec in enumerate(s.lesions):
    differs = [a for a, b in zip(spec.attrs, target) if a != b]
    role = "target" if i == 0 else f"distractor, differs in {differs}"
    r, c = spec.center
    print(f"  lesion {i}: {' / '.join(spec.attrs):<55} at ({r:5.1f}, {c:5.1f})  [{role}]")

# Every lesion looks like a lesion; only the caption says which one to segment.
everything = np.zeros_like(s.mask)
for spec in s.lesions:
    everything |= rasterize(spec, s.image.shape[0]).astype(np.uint8)
write_pgm(out / "image.pgm", np.round(s.image * 255).astype(np.uint8))
write_pgm(out / "target.pgm", s.mask * 255)
write_pgm(out / "all_lesions.pgm", everything * 255)
print(f"\ntarget covers {int(s.mask.sum())} px of {int(everything.sum())} lesion px; files in {out}/")
