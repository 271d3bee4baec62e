"""How much does bagging hide from a learner?

Take labels uniform on [0, 1] and the constant predictor h = 1/2. Its
instance loss is the label variance, 1/12. Averaging labels inside a bag of
size k shrinks the variance of the bag label by k, so the bag loss of the
same predictor is only 1/(12k). Bag-level feedback gets weaker in direct
proportion to the bag size.
"""
from llpcs.bound_lab import appendix_c_scan

scan = appendix_c_scan(ks=(1, 2, 4, 8, 16, 32, 64), m=100_000)
print(f"{'k':>4} {'instance':>10} {'bag':>10} {'1/(12k)':>10} {'ratio':>7}")
for k, row in scan["rows"].items():
    print(f"{k:>4} {row['instance_loss']:>10.5f} {row['bag_loss']:>10.6f} {1 / (12 * k):>10.6f} {row['ratio']:>7.2f}")
print(f"log-log slope of instance/bag vs k: {scan['slope']:.3f}")
