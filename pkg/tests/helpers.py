"""Small configurations shared by the slower tests."""

from camogen.config import Config, config_from_dict


def tiny_config(**train) -> Config:
    d = Config().to_dict()
    d["data"]["image_size"] = 16
    d["model"].update(dim=16, channels=8, heads=2, max_objects=4, prototypes=3, text_length=8,
                      text_buckets=64)
    d["diffusion"].update(num_steps=40, sample_steps=5)
    d["train"].update(steps=4, batch_size=4, depth_timestep=10)
    d["train"].update(train)
    return config_from_dict(d)
