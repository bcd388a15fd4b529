"""Caption decoder tests: causality, sentence-end pooling, generation."""

import pytest
import torch

from changecap.decoder import CaptionDecoder, DecoderConfig
from changecap.errors import ConfigurationError
from changecap.vocab import END, PAD, START

CFG = DecoderConfig(vocab_size=20, dim=16, num_heads=2, unimodal_layers=1,
                    multimodal_layers=1, max_len=12)


def _inputs(b=2, n=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    ids = torch.randint(4, 20, (b, n), generator=g)
    ids[:, 0] = START
    image_tokens = torch.randn(b, 9, 16, generator=g)
    lengths = torch.full((b,), n)
    return ids, image_tokens, lengths


def test_forward_shapes():
    dec = CaptionDecoder(CFG)
    ids, img, lengths = _inputs()
    logits, s_end = dec(ids, img, lengths)
    assert logits.shape == (2, 8, 20)
    assert s_end.shape == (2, 16)


def test_causality_future_tokens_do_not_affect_past_logits():
    torch.manual_seed(0)
    dec = CaptionDecoder(CFG).double()
    ids, img, lengths = _inputs()
    img = img.double()
    logits, _ = dec(ids, img, lengths)
    for pos in (2, 5):
        mutated = ids.clone()
        mutated[:, pos + 1 :] = torch.randint(4, 20, mutated[:, pos + 1 :].shape)
        logits_m, _ = dec(mutated, img, lengths)
        assert (logits[:, : pos + 1] - logits_m[:, : pos + 1]).abs().max() < 1e-6


def test_s_end_taken_at_length_minus_one():
    torch.manual_seed(1)
    dec = CaptionDecoder(CFG)
    ids, img, _ = _inputs(b=1)
    lengths = torch.tensor([5])
    s_seq, s_end = dec.unimodal_forward(dec.embed_tokens(ids), lengths)
    torch.testing.assert_close(s_end, s_seq[:, 4])


def test_s_end_invariant_to_trailing_padding():
    torch.manual_seed(2)
    dec = CaptionDecoder(CFG).double()
    ids = torch.tensor([[START, 5, 6, END, PAD, PAD]])
    longer = torch.tensor([[START, 5, 6, END, PAD, PAD, PAD, PAD]])
    lengths = torch.tensor([4])
    _, s1 = dec.unimodal_forward(dec.embed_tokens(ids), lengths)
    _, s2 = dec.unimodal_forward(dec.embed_tokens(longer), lengths)
    torch.testing.assert_close(s1, s2, atol=1e-9, rtol=0)


def test_length_one_sequence():
    dec = CaptionDecoder(CFG)
    ids = torch.tensor([[START]])
    s_seq, s_end = dec.unimodal_forward(dec.embed_tokens(ids), torch.tensor([1]))
    torch.testing.assert_close(s_end, s_seq[:, 0])


def test_invalid_lengths_rejected():
    dec = CaptionDecoder(CFG)
    ids, _, _ = _inputs(b=1)
    with pytest.raises(ConfigurationError):
        dec.unimodal_forward(dec.embed_tokens(ids), torch.tensor([0]))
    with pytest.raises(ConfigurationError):
        dec.unimodal_forward(dec.embed_tokens(ids), torch.tensor([9]))


def test_sequence_longer_than_max_len_rejected():
    dec = CaptionDecoder(CFG)
    with pytest.raises(ConfigurationError):
        dec.embed_tokens(torch.zeros(1, 13, dtype=torch.long))


def test_tied_weights_share_storage():
    dec = CaptionDecoder(CFG)
    assert dec.output_proj is None
    x = torch.randn(1, 3, 16)
    logits = dec.multimodal_forward(x, torch.randn(1, 9, 16))
    expected = x @ dec.embedding.weight.T
    # multimodal layers transform x first, so compare via direct projection
    torch.testing.assert_close(
        torch.nn.functional.linear(x, dec.embedding.weight), expected
    )
    assert logits.shape == (1, 3, 20)


def test_untied_weights_have_own_projection():
    cfg = DecoderConfig(vocab_size=20, dim=16, num_heads=2, tie_weights=False, max_len=12)
    dec = CaptionDecoder(cfg)
    assert dec.output_proj is not None
    assert dec.output_proj.weight.data_ptr() != dec.embedding.weight.data_ptr()


def test_generate_starts_with_start_and_is_deterministic():
    torch.manual_seed(3)
    dec = CaptionDecoder(CFG)
    img = torch.randn(3, 9, 16)
    out1 = dec.generate(img)
    out2 = dec.generate(img)
    assert torch.equal(out1, out2)
    assert (out1[:, 0] == START).all()
    assert out1.shape[1] <= CFG.max_len


def test_generate_pads_after_end():
    torch.manual_seed(4)
    dec = CaptionDecoder(CFG)
    out = dec.generate(torch.randn(4, 9, 16))
    for row in out:
        row = row.tolist()
        if END in row:
            tail = row[row.index(END) + 1 :]
            assert all(t == PAD for t in tail)
