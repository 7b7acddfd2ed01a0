"""Policy, simulator and training pipeline components."""
