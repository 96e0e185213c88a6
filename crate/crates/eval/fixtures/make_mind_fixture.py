"""Regenerates mind_small/, a 100-impression fixture in the MIND tab-separated layout.

Titles are invented; only the file format follows MIND.
"""
import json
import random
from datetime import datetime, timedelta
from pathlib import Path

OUT = Path(__file__).parent / "mind_small"
rng = random.Random(20240101)

SUBJECTS = {
    "news": ["city council budget", "school board vote", "bridge repairs", "local election", "transit strike"],
    "sports": ["football playoffs", "marathon record", "tennis final", "basketball trade", "cycling tour"],
    "lifestyle": ["home gardening", "minimalist living", "wedding planning", "family holidays", "mother-in-law advice"],
    "foodanddrink": ["sourdough baking", "street food", "vegan recipes", "coffee brewing", "barbecue tips"],
    "health": ["sleep habits", "running injuries", "flu season", "mental health", "diet myths"],
    "entertainment": ["celebrity gossip", "horror movies", "award shows", "reality tv", "concert tours"],
    "travel": ["mountain hiking", "budget flights", "island resorts", "road trips", "city breaks"],
    "finance": ["stock market", "housing prices", "retirement savings", "credit cards", "tax filing"],
}
FRAMES = [
    "What everyone gets wrong about {s}",
    "{S}: a beginner's guide",
    "Ten things to know about {s}",
    "Why {s} is in the headlines again",
    "The surprising history of {s}",
    "Experts weigh in on {s}",
]

news = []
for category, subjects in SUBJECTS.items():
    for subject in subjects:
        for _ in range(2):
            nid = f"N{len(news) + 1}"
            frame = rng.choice(FRAMES)
            title = frame.format(s=subject, S=subject.capitalize())
            abstract = f"A short piece on {subject}."
            entities = json.dumps([{"Label": subject.title(), "Type": "C"}])
            news.append((nid, category, subject.replace(" ", ""), title, abstract,
                         f"https://example.invalid/{nid}", entities, "[]"))

# (user, impressions, clicks per impression); 100 impressions in total.
USERS = [("U1", 25, 4), ("U2", 15, 3), ("U3", 12, 2), ("U4", 10, 1), ("U5", 8, 1),
         ("U6", 8, 1), ("U7", 7, 1), ("U8", 6, 2), ("U9", 5, 1), ("U10", 4, 1)]
assert sum(n for _, n, _ in USERS) == 100

ids = [n[0] for n in news]
start = datetime(2019, 11, 11, 6, 0, 0)
rows = []
for user, count, clicks in USERS:
    history = " ".join(rng.sample(ids, 5))
    for i in range(count):
        # Every ninth impression has only two unclicked items, too few for K=4.
        unclicked = 2 if (len(rows) % 9 == 8) else rng.randint(3, 7)
        shown = rng.sample(ids, clicks + unclicked)
        labels = [f"{nid}-1" for nid in shown[:clicks]] + [f"{nid}-0" for nid in shown[clicks:]]
        rng.shuffle(labels)
        rows.append([user, history, " ".join(labels)])

rng.shuffle(rows)
lines = []
for i, (user, history, labels) in enumerate(rows):
    when = start + timedelta(minutes=37 * i + rng.randint(0, 30))
    stamp = when.strftime("%m/%d/%Y %I:%M:%S %p").lstrip("0").replace("/0", "/")
    lines.append("\t".join([str(i + 1), user, stamp, history, labels]))
# A row without impressions, which loaders skip.
lines.append("\t".join(["101", "U4", "11/13/2019 9:00:00 AM", "", ""]))

OUT.mkdir(exist_ok=True)
(OUT / "news.tsv").write_text("".join("\t".join(n) + "\n" for n in news))
(OUT / "behaviors.tsv").write_text("".join(line + "\n" for line in lines))
print(f"{len(news)} news items, {len(lines)} behavior rows")
