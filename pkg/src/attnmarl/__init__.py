"""Cross-context attentional policies for multi-agent PPO on a merge simulator."""

__version__ = "0.1.0"
