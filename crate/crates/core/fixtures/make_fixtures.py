"""Regenerate the test fixtures: a small manga book and a 3-class face dataset.

Usage: python3 make_fixtures.py   (writes next to this file; needs Pillow)
"""
import os
import random
from xml.sax.saxutils import escape

from PIL import Image, ImageDraw

HERE = os.path.dirname(os.path.abspath(__file__))
LABELS = ["happy", "sad", "surprise"]


def draw_face(draw, cx, cy, r, label, rng, ink=20):
    w = max(2, r // 12)
    jx, jy = rng.randint(-1, 1), rng.randint(-1, 1)
    cx, cy = cx + jx, cy + jy
    draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=(250, 236, 222), outline=(ink,) * 3, width=w)
    ex, ey, er = r * 0.38, cy - r * 0.18, max(2, r // 9)
    if label == "surprise":
        er = int(er * 1.6)
    for sx in (-1, 1):
        x = cx + sx * ex
        draw.ellipse([x - er, ey - er, x + er, ey + er], fill=(ink,) * 3)
        # brows
        by = ey - r * (0.42 if label == "surprise" else 0.28)
        if label == "sad":
            draw.line([x - er * 2, by + sx * -r * 0.08, x + er * 2, by - sx * -r * 0.08], fill=(ink,) * 3, width=w)
        else:
            draw.line([x - er * 2, by, x + er * 2, by], fill=(ink,) * 3, width=w)
    my, mw = cy + r * 0.42, r * 0.45
    if label == "happy":
        draw.arc([cx - mw, my - mw * 0.9, cx + mw, my + mw * 0.5], 20, 160, fill=(ink,) * 3, width=w + 1)
    elif label == "sad":
        draw.arc([cx - mw, my - mw * 0.1, cx + mw, my + mw * 1.2], 200, 340, fill=(ink,) * 3, width=w + 1)
    else:
        mh = r * 0.22
        draw.ellipse([cx - mh * 0.8, my - mh, cx + mh * 0.8, my + mh], fill=(ink,) * 3)


def emotion_dataset():
    root = os.path.join(HERE, "emotion")
    os.makedirs(os.path.join(root, "faces"), exist_ok=True)
    os.makedirs(os.path.join(root, "splits"), exist_ok=True)
    with open(os.path.join(root, "labels.txt"), "w") as f:
        f.write("# face expression classes\n" + "\n".join(LABELS) + "\n")
    rng = random.Random(7)
    rows = {"train": [], "val": [], "test": []}
    for label in LABELS:
        for k in range(10):
            bg = rng.randint(215, 255)
            img = Image.new("RGB", (64, 64), (bg, bg, bg))
            draw = ImageDraw.Draw(img)
            draw_face(draw, 32, 32, rng.randint(24, 28), label, rng)
            name = f"faces/{label}_{k:02d}.png"
            img.save(os.path.join(root, name))
            split = "train" if k < 6 else ("val" if k < 7 else "test")
            rows[split].append((name, label))
    for split, items in rows.items():
        rng.shuffle(items)
        with open(os.path.join(root, "splits", f"{split}.csv"), "w") as f:
            f.write("image,label\n")
            for name, label in items:
                f.write(f"{name},{label}\n")


# (page faces as (character, label)), dialogue as (speaker or None for narration, text)
PAGES = [
    ([("aki", "happy"), ("ren", "happy")], [
        ("aki", "Ren! Over here, the festival starts at six!"),
        ("ren", "I know, I know. I brought the lanterns."),
        ("aki", "You remembered? That's a first."),
        ("ren", "Very funny."),
    ]),
    ([("aki", "happy"), ("ren", "surprise")], [
        ("aki", "Look at all the stalls this year."),
        ("ren", "Is that a goldfish game?"),
        ("aki", "Let's try it. Loser buys the shaved ice."),
        ("ren", "Deal. Prepare to lose."),
    ]),
    ([("ren", "happy")], [
        ("ren", "Three fish! Did you see that?"),
        ("aki", "Beginner's luck."),
        (None, "The lanterns flickered on, one by one."),
    ]),
    ([], []),
    ([("aki", "sad")], [
        (None, "Later that night, at home."),
        ("mother", "You're back early. Did something happen?"),
        ("aki", "Ren is moving away next month."),
        ("mother", "Oh, Aki..."),
    ]),
    ([("aki", "sad"), ("mother", "sad")], [
        ("aki", "He told me at the end of the festival."),
        ("mother", "You two have been friends since you were five."),
        ("aki", "I didn't even say anything. I just walked home."),
        ("mother", "Maybe you can still tell him tomorrow."),
    ]),
    ([("kai", "surprise"), ("ren", "surprise")], [
        ("kai", "Wait, you're not moving after all?"),
        ("ren", "My father's transfer was cancelled this morning!"),
        ("kai", "No way! Does Aki know?"),
        ("ren", "Not yet. I'm going to tell her right now."),
    ]),
    ([("kai", "happy"), ("ren", "surprise")], [
        ("kai", "Then what are you waiting for? Run!"),
        ("ren", "Aki! Aki, wait!"),
    ]),
]
CHARACTERS = {"aki": "Aki", "ren": "Ren", "mother": "Mother", "kai": "Kai"}


def book():
    book_id = "harbor_days"
    img_dir = os.path.join(HERE, "books", "images", book_id)
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(os.path.join(HERE, "books", "annotations"), exist_ok=True)
    os.makedirs(os.path.join(HERE, "books", "dialog"), exist_ok=True)
    rng = random.Random(11)
    W, H = 400, 600
    xml = ['<?xml version="1.0" encoding="utf-8"?>', f'<book title="{book_id}">', "  <characters>"]
    for cid, name in CHARACTERS.items():
        xml.append(f'    <character id="{cid}" name="{name}"/>')
    xml += ["  </characters>", "  <pages>"]
    links = []
    tid = 0
    for p, (faces, lines) in enumerate(PAGES):
        img = Image.new("RGB", (W, H), (245, 245, 240))
        draw = ImageDraw.Draw(img)
        # panel borders
        for y0, y1 in ((10, 290), (310, 590)):
            draw.rectangle([10, y0, W - 10, y1], outline=(30, 30, 30), width=3)
        if not faces:
            # a scenery page: skyline and sea
            for x in range(20, W - 20, 30):
                h = rng.randint(40, 160)
                draw.rectangle([x, 280 - h, x + 22, 280], fill=(90, 90, 100))
            for y in range(330, 580, 12):
                draw.line([20, y, W - 20, y + rng.randint(-4, 4)], fill=(80, 110, 160), width=2)
        xml.append(f'    <page index="{p}" width="{W}" height="{H}">')
        # balloons first so faces stay fully visible
        for order, (speaker, text) in enumerate(lines):
            tid += 1
            text_id = f"t{tid:03d}"
            x0 = 220 if order % 2 == 0 else 30
            y0 = 30 + order * 60
            draw.rectangle([x0, y0, x0 + 150, y0 + 45], fill=(255, 255, 255), outline=(0, 0, 0), width=2)
            kind = ' kind="narration"' if speaker is None else ""
            xml.append(
                f'      <text id="{text_id}" xmin="{x0}" ymin="{y0}" xmax="{x0 + 150}" ymax="{y0 + 45}"'
                f' order="{order}"{kind}>{escape(text)}</text>'
            )
            if speaker is not None:
                links.append((text_id, speaker))
        for k, (cid, label) in enumerate(faces):
            r = 44
            cx = 110 + k * 180
            cy = 150 if k % 2 == 0 else 440
            draw_face(draw, cx, cy, r, label, rng)
            m = r + 6
            xml.append(
                f'      <face id="{book_id}-p{p}-f{k}" xmin="{cx - m}" ymin="{cy - m}" '
                f'xmax="{cx + m}" ymax="{cy + m}" character="{cid}"/>'
            )
        xml.append("    </page>")
        img.save(os.path.join(img_dir, f"{p:03d}.png"))
    xml += ["  </pages>", "</book>", ""]
    with open(os.path.join(HERE, "books", "annotations", f"{book_id}.xml"), "w") as f:
        f.write("\n".join(xml))
    dialog = ['<?xml version="1.0" encoding="utf-8"?>', f'<book title="{book_id}">']
    for text_id, speaker in links:
        dialog.append(f'  <speaker_to_text id="s{text_id}" text_id="{text_id}" speaker_id="{speaker}"/>')
    dialog += ["</book>", ""]
    with open(os.path.join(HERE, "books", "dialog", f"{book_id}.xml"), "w") as f:
        f.write("\n".join(dialog))


if __name__ == "__main__":
    emotion_dataset()
    book()
