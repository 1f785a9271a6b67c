"""Procedural shape-world data: scenes, images, text, task examples, manifests."""
