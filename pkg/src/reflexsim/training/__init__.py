"""Two-stage PPO training: velocity-tracking experts, then the high-level evasive policy."""
