# Documents, placeholders and packing on the synthetic-shapes world.
#
#   python3 demos/01_documents_and_sequences.py

# %%
from dataclasses import replace

import numpy as np

from deem.base import build_tokenizer
from deem.datamodel import InterleavedDocument, TextSpan
from deem.sequence import assemble, filter_interleaved, mark_condition_dropout, pack
from deem.synth import make_samples, split_combos, train_documents

rng = np.random.default_rng(0)
train_combos, ood_combos = split_combos()
print(len(train_combos), "training combinations,", len(ood_combos), "held out")

# %% a handful of image/caption documents; the image lands before or after the text at random
samples = make_samples(train_combos, 6, 32, rng)
docs = train_documents(samples, rng)
for d in docs[:3]:
    print([e.text if isinstance(e, TextSpan) else "<image>" for e in d.elements])

# %% every image becomes <SOI> followed by M placeholder ids; placeholders carry no text loss
tok = build_tokenizer()
seq = assemble(docs[0], tok, num_visual_tokens=8)
print(tok.decode(seq.token_ids.tolist()))
print("ntp mask:", seq.ntp_mask.tolist())
print("image slots (position, image index):", seq.embedding_slots)

# %% packing concatenates fragments in order; only the first image of a pack counts as sequence-initial
fragments = [assemble(d, tok, num_visual_tokens=8) for d in docs]
packs = pack(fragments, max_len=64)
for p in packs:
    p = mark_condition_dropout(p, 0.1, rng)
    print(len(p), [(e.is_first_in_sequence, e.condition_dropped) for e in p.image_entries])

# %% interleaved-corpus filtering: low-similarity images go, single-image documents survive half the time
scored = [replace(s.image, similarity_score=score) for s, score in zip(make_samples(train_combos, 3, 32, rng), (0.5, 0.1, 0.3))]
doc = InterleavedDocument([TextSpan("three pictures"), *scored])
kept = filter_interleaved(doc, rng)
print("kept scores:", None if kept is None else [im.similarity_score for im in kept.images])
