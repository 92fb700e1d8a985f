"""HTTP service: mask inspection, generation with system-prompt snapshots, head atlas."""
