"""
okgrad - online gradient estimation for recurrent networks

Exact RTRL, truncated BPTT and unbiased low-memory approximations of RTRL
(UORO, KF-RTRL, optimal Kronecker-Sum compression, Kronecker triple products)
on a single-layer Recurrent Highway Network.
"""

__version__ = "0.1.0"
