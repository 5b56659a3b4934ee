"""How the focal gate decides who learns from whom.

The gate for the pair (m, n) is relu(exp(beta * (loss_m - loss_n)) - 1).
Only the network that is currently worse gets a positive weight, so a
strong network is never pulled toward a weak one.

    python3 demos/focal_gate.py
"""

from mtut import focal_rho

print("loss_m  loss_n   rho(m<-n)  rho(n<-m)")
for lm, ln in [(1.0, 1.0), (1.2, 1.0), (1.5, 1.0), (2.0, 1.0), (2.0, 0.0), (0.3, 1.8)]:
    fwd = focal_rho(lm, ln, 2.0).rho
    back = focal_rho(ln, lm, 2.0).rho
    print(f"{lm:6.2f}  {ln:6.2f}  {fwd:10.4f} {back:10.4f}")

# beta sharpens the gate: the same loss gap weighs more
for beta in (0.5, 1.0, 2.0, 4.0):
    print(f"beta={beta:3.1f}  gap 0.5 -> rho {focal_rho(1.5, 1.0, beta).rho:.4f}")
