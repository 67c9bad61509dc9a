"""Generate the bundled toy corpora under crates/core/data/.

Sentences come from a small template grammar with a sentiment label
(1 = positive, 0 = negative). Output is deterministic for a fixed seed.
"""
import random
from pathlib import Path

DET = "the a this that every some one my our their".split()
POS_ADJ = """good great warm bright lovely gentle clever brave charming fresh
kind joyful honest calm vivid elegant tender witty sweet smart
rich graceful lively sincere pleasant superb splendid fine noble cheerful""".split()
NEG_ADJ = """bad dull cold dark ugly harsh stupid weak boring stale
cruel gloomy dishonest tense bland clumsy bitter silly sour lazy
poor awkward sloppy shallow tedious awful dreadful cheap grim sullen""".split()
ADJ = """old new small large long short quiet loud early late
simple strange young plain narrow wide heavy light distant local""".split()
NOUN = """film movie story plot actor actress director script scene ending
cast score camera writer hero villain city river forest house garden
teacher student child parent doctor farmer singer painter soldier king
queen village mountain ocean window door road bridge train ship
letter book song poem dream memory voice face heart mind
dog cat horse bird fish tree flower stone fire rain
morning evening night winter summer spring autumn island castle tower
market kitchen table chair lamp mirror clock coat hat shoe
friend stranger neighbor captain pilot nurse judge lawyer baker thief
engine wheel garage station harbor valley meadow desert canyon glacier
violin piano drum guitar trumpet flute choir concert theater museum
library school office factory church temple palace prison hospital hotel
cousin uncle aunt sister brother daughter son widow bride groom
sailor hunter miner rider dancer poet prince princess duke knight
wolf bear fox deer rabbit mouse snake eagle owl whale
apple bread cheese soup cake coffee wine honey salt sugar
sword shield arrow crown ring necklace candle blanket basket bottle
storm cloud thunder wind snow fog sunset shadow star moon
journey battle wedding funeral festival parade trial secret promise lesson""".split()
VERB = """loves hates follows finds leaves watches visits helps builds breaks
opens closes carries paints writes reads sings tells shows hides
meets calls pushes pulls holds throws catches sees hears misses
chases greets guards teaches feeds cleans fixes moves wakes warns
admires abandons rescues betrays praises blames trusts doubts forgives ignores
remembers forgets invites attacks defends protects kisses hugs loses wins
draws cooks buys sells steals selects""".split()
ADV = """slowly quickly quietly warmly badly gently boldly sadly happily rarely
often always never nearly barely truly deeply simply clearly softly
proudly gladly wisely kindly fiercely calmly oddly surely swiftly loudly""".split()
PREP = "in on near under over behind beside with without from into across".split()
CONJ = "and but while because".split()
INTENS = "very rather quite too so".split()


def adj_for(label, rng):
    pool = POS_ADJ if label == 1 else NEG_ADJ
    if rng.random() < 0.25:
        return rng.choice(ADJ)
    if rng.random() < 0.3:
        return rng.choice(INTENS) + " " + rng.choice(pool)
    return rng.choice(pool)


def noun_phrase(label, rng, with_adj=True):
    words = [rng.choice(DET)]
    if with_adj:
        words.append(adj_for(label, rng))
    words.append(rng.choice(NOUN))
    return " ".join(words)


def clause(label, rng):
    parts = [noun_phrase(label, rng, rng.random() < 0.7), rng.choice(VERB)]
    parts.append(noun_phrase(label, rng, rng.random() < 0.6))
    if rng.random() < 0.4:
        parts.append(rng.choice(ADV))
    if rng.random() < 0.3:
        parts.append(rng.choice(PREP) + " " + noun_phrase(label, rng, False))
    return " ".join(parts)


def sentence(label, rng, lo, hi):
    for _ in range(1000):
        s = clause(label, rng)
        while len(s.split()) < lo:
            s += " " + rng.choice(CONJ) + " " + clause(label, rng)
        n = len(s.split())
        if lo <= n <= hi:
            return s
    raise RuntimeError("could not satisfy length range")


def write_tsv(path, n, lo, hi, seed):
    rng = random.Random(seed)
    with open(path, "w") as f:
        for _ in range(n):
            label = rng.randint(0, 1)
            f.write(f"{label}\t{sentence(label, rng, lo, hi)}\n")


def main():
    out = Path(__file__).resolve().parent.parent / "crates" / "core" / "data"
    out.mkdir(parents=True, exist_ok=True)
    write_tsv(out / "toy_short.tsv", 200, 5, 9, 1)
    write_tsv(out / "toy_medium.tsv", 200, 3, 13, 2)
    write_tsv(out / "toy_long.tsv", 200, 14, 27, 3)
    rng = random.Random(4)
    with open(out / "toy_prior.txt", "w") as f:
        for _ in range(4000):
            label = rng.randint(0, 1)
            f.write(sentence(label, rng, 3, 27) + "\n")


if __name__ == "__main__":
    main()
