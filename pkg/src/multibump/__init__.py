"""Multibump solutions of -Δv - K(x)v + v^(q-1) = 0 on ball unions."""
