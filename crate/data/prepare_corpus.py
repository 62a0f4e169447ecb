"""Rebuilds data/train and data/test from the scikit-image sample images."""
import os
import sys

from PIL import Image
import skimage

SRC = os.path.join(os.path.dirname(skimage.__file__), "data")
HERE = os.path.dirname(os.path.abspath(__file__))

# name -> (file, downscale factor)
PHOTOS = {
    "chelsea": ("chelsea.png", 2),
    "coffee": ("coffee.png", 2),
    "rocket": ("rocket.jpg", 2),
    "astronaut": ("astronaut.png", 2),
}
# Held-out 64x64 crops, all in the right half of the downscaled photo.
TEST_CROPS = {
    "chelsea": (120, 40),
    "coffee": (150, 110),
    "rocket": (176, 120),
    "astronaut": (170, 40),
}
OTHER_TRAIN = {
    "camera": ("camera.png", 2),
    "ihc": ("ihc.png", 2),
    "retina": ("retina.jpg", 4),
    "hubble": ("hubble_deep_field.jpg", 3),
    "brick": ("brick.png", 2),
    "gravel": ("gravel.png", 2),
}


def load(name, factor):
    im = Image.open(os.path.join(SRC, name)).convert("RGB")
    w, h = im.size
    return im.resize((w // factor, h // factor), Image.LANCZOS)


def main():
    os.makedirs(os.path.join(HERE, "train"), exist_ok=True)
    os.makedirs(os.path.join(HERE, "test"), exist_ok=True)
    for key, (name, f) in PHOTOS.items():
        im = load(name, f)
        w, h = im.size
        im.crop((0, 0, w // 2, h)).save(os.path.join(HERE, "train", key + "_left.png"))
        x, y = TEST_CROPS[key]
        assert x >= w // 2 and x + 64 <= w and y + 64 <= h
        im.crop((x, y, x + 64, y + 64)).save(os.path.join(HERE, "test", key + ".png"))
    for key, (name, f) in OTHER_TRAIN.items():
        load(name, f).save(os.path.join(HERE, "train", key + ".png"))
    grass = Image.open(os.path.join(SRC, "grass.png")).convert("RGB")
    grass.crop((0, 0, 256, 512)).resize((128, 256), Image.LANCZOS).save(os.path.join(HERE, "train", "grass_left.png"))
    grass.crop((320, 320, 448, 448)).save(os.path.join(HERE, "roi_texture.png"))
    return 0


if __name__ == "__main__":
    sys.exit(main())
