"""Desk-scale diffusion-policy locomotion lab: multi-gait behavior cloning
with diffusion policies, PPO finetuning over the denoising chain, and
language-conditioned goals on a toy quadruped oscillator plant."""

__version__ = "0.1.0"
