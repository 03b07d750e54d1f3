"""Segmentation metrics and the paired test on cases small enough to check by eye."""
import numpy as np

from useg.metrics import dice_score, evaluate_case, hausdorff95, jaccard
from useg.stats import paired_test

gt = np.zeros((8, 8), np.uint8)
gt[2:6, 2:6] = 1  # a 4x4 square
pred = np.zeros_like(gt)
pred[2:6, 3:7] = 1  # the same square, shifted one column right

# 12 shared pixels, 4 extra, 4 missed: Dice 24/32, Jaccard 12/20
print("dice", dice_score(pred, gt), "jaccard", jaccard(pred, gt))
# every boundary pixel is within one step of the other boundary
print("hd95", hausdorff95(pred, gt))

# an empty prediction against a real lesion: the distance is undefined, so the
# image diagonal stands in and the case is flagged
print(evaluate_case("missed", np.zeros_like(gt), gt))

# eight cases where model A beats model B every time: the smallest two-sided
# p-value a signed-rank test can give with eight pairs is 2 / 2**8
a = np.array([0.91, 0.88, 0.95, 0.79, 0.85, 0.9, 0.93, 0.81])
b = a - np.array([0.1, 0.02, 0.3, 0.05, 0.07, 0.15, 0.01, 0.2])
print(paired_test(a, b))
