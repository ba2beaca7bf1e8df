"""Parameters, objective, training loop, LoRA adapters and cross-task transfer."""
