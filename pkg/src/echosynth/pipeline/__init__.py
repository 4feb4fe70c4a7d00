from .io import ModelCheckpoint, load_volume, save_volume

__all__ = ["ModelCheckpoint", "load_volume", "save_volume"]
