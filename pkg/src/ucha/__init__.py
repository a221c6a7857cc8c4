"""UCHA: a multi-user VR NOMA downlink simulator with heterogeneous PPO
actors and a user-centric multi-head critic, plus HAPPO, IPPO and random
baselines."""

__version__ = "0.1.0"
