#!/usr/bin/env python3
"""Writes the small hand-written example task sets under data/tasks."""
import json
import pathlib
import string
import sys

CAPITALS = [
    ("France", "Paris"), ("Spain", "Madrid"), ("Italy", "Rome"), ("Germany", "Berlin"),
    ("Japan", "Tokyo"), ("Egypt", "Cairo"), ("Peru", "Lima"), ("Cuba", "Havana"),
    ("Kenya", "Nairobi"), ("Chile", "Santiago"), ("Norway", "Oslo"), ("Greece", "Athens"),
    ("Poland", "Warsaw"), ("Austria", "Vienna"), ("Ireland", "Dublin"), ("Portugal", "Lisbon"),
    ("Russia", "Moscow"), ("China", "Beijing"), ("India", "New Delhi"), ("Canada", "Ottawa"),
    ("Mexico", "Mexico City"), ("Sweden", "Stockholm"), ("Finland", "Helsinki"), ("Denmark", "Copenhagen"),
    ("Belgium", "Brussels"), ("Hungary", "Budapest"), ("Thailand", "Bangkok"), ("Vietnam", "Hanoi"),
    ("Iran", "Tehran"), ("Iraq", "Baghdad"), ("Syria", "Damascus"), ("Lebanon", "Beirut"),
    ("Jordan", "Amman"), ("Nepal", "Kathmandu"), ("Ghana", "Accra"), ("Senegal", "Dakar"),
    ("Mali", "Bamako"), ("Uganda", "Kampala"), ("Somalia", "Mogadishu"), ("Cabo Verde", "Praia"),
    ("Sierra Leone", "Freetown"), ("Argentina", "Buenos Aires"), ("Colombia", "Bogota"),
    ("Venezuela", "Caracas"), ("Ecuador", "Quito"),
]

WORDS = [
    "apple", "river", "stone", "cloud", "table", "garden", "window", "silver", "forest", "candle",
    "harbor", "winter", "pepper", "marble", "violin", "bridge", "desert", "lantern", "meadow", "pocket",
    "rocket", "saddle", "thunder", "velvet", "walnut", "yellow", "anchor", "button", "copper", "dragon",
    "engine", "falcon", "glacier", "hammer", "island", "jacket", "kettle", "ladder", "magnet", "needle",
]

SEQUENCES = [
    ["one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"],
    ["Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday"],
    ["January", "February", "March", "April", "May", "June", "July", "August", "September",
     "October", "November", "December"],
    list(string.ascii_lowercase),
]


def write_task(root, name, pairs, template="icl", natural_format=None, split_seed=0):
    task_dir = root / name
    task_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"name": name, "template": template, "pairs_path": "pairs.jsonl", "split_seed": split_seed}
    if natural_format is not None:
        manifest["natural_format"] = natural_format
    (task_dir / "task.json").write_text(json.dumps(manifest, indent=2) + "\n")
    with open(task_dir / "pairs.jsonl", "w") as f:
        for q, a in pairs:
            f.write(json.dumps({"question": q, "answer": a}) + "\n")


def main():
    root = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else "data/tasks")
    write_task(root, "country_capital", CAPITALS, split_seed=1)
    write_task(root, "country_capital_natural", CAPITALS, template="natural",
               natural_format="The capital city of <question> is <answer>", split_seed=1)
    write_task(root, "capitalize", [(w, w.capitalize()) for w in WORDS], split_seed=2)
    nexts = [(seq[i], seq[i + 1]) for seq in SEQUENCES for i in range(len(seq) - 1)]
    write_task(root, "next_item", nexts, split_seed=3)


if __name__ == "__main__":
    main()
