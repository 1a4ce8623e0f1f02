import numpy as np
import torch

from deem.datamodel import ImageRecord, InterleavedDocument, TextSpan
from deem.diffusion import sample as diffusion_sample
from deem.generation import answer_question, generate, transcript_document

from conftest import tiny_model


class CountingSampler:
    def __init__(self):
        self.calls = []

    def __call__(self, dm, schedule, cond, shape, steps, scale, gen):
        self.calls.append(cond.source)
        return diffusion_sample(dm, schedule, cond, shape, steps, scale, gen)


def test_forced_soi_triggers_one_sampler_call_and_resumes():
    model = tiny_model()
    sp = model.special
    counter = CountingSampler()
    prompt = InterleavedDocument([TextSpan("a red circle")])
    tr = generate(model, prompt, max_tokens=4, max_images=1, temperature=0.0, forced_tokens=[sp.soi_id],
                  stop_at_eos=False, sampler=counter)
    assert counter.calls == ["llm_context"]
    assert tr.sampler_calls == 1 and len(tr.images) == 1
    soi = tr.token_ids.index(sp.soi_id)
    M = model.num_visual_tokens
    assert tr.token_ids[soi + 1 : soi + 1 + M] == [sp.img_id] * M
    pos, vis = tr.slots[-1]
    assert pos == soi + 1
    with torch.no_grad():
        expect = model.visual_tokens(torch.as_tensor(tr.images[0])[None])[0]
    assert torch.allclose(vis, expect)
    # text generation continued after the image
    assert len(tr.token_ids) > soi + 1 + M
    E = tr.context_embeddings(model)
    assert torch.allclose(E[pos : pos + M], expect)


def test_temperature_zero_is_deterministic():
    model = tiny_model()
    prompt = InterleavedDocument([TextSpan("a blue square")])
    a = generate(model, prompt, max_tokens=6, temperature=0.0, forced_tokens=[model.special.soi_id], stop_at_eos=False)
    b = generate(model, prompt, max_tokens=6, temperature=0.0, forced_tokens=[model.special.soi_id], stop_at_eos=False)
    assert a.token_ids == b.token_ids and a.text == b.text
    assert np.array_equal(a.images[0], b.images[0])


def test_budgets_respected():
    model = tiny_model()
    sp = model.special
    counter = CountingSampler()
    tr = generate(model, InterleavedDocument([TextSpan("a")]), max_tokens=3, max_images=0, temperature=0.0,
                  forced_tokens=[sp.soi_id], sampler=counter)
    assert counter.calls == [] and sp.soi_id not in tr.generated
    tr = generate(model, InterleavedDocument([TextSpan("a")]), max_tokens=5, temperature=1.0, stop_at_eos=False, seed=3)
    assert len(tr.generated) <= 5


def test_transcript_document_and_answer():
    model = tiny_model()
    tr = generate(model, InterleavedDocument([TextSpan("a")]), max_tokens=3, temperature=0.0,
                  forced_tokens=[model.special.soi_id], stop_at_eos=False)
    doc = transcript_document(tr, model)
    assert isinstance(doc.elements[0], ImageRecord)
    img = ImageRecord(np.random.default_rng(0).random((16, 16, 3)).astype(np.float32))
    out = answer_question(model, img, "is it yes or no", max_tokens=2)
    assert isinstance(out, str)
