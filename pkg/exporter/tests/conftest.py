"""Session fixtures: a tiny randomly initialized BERT saved to disk.

Everything runs offline.  The tokenizer is a WordPiece over a toy
vocabulary, assembled directly with the tokenizers library; building
one from a bare vocab.txt no longer round-trips, it silently keeps
only the special tokens and maps every word to [UNK].
"""

import pytest

pytest.importorskip("embed_exporter")
pytest.importorskip("torch")
pytest.importorskip("transformers")

from tinymodel import DEPTH, HIDDEN, VOCAB


def build_tokenizer():
    from tokenizers import Tokenizer
    from tokenizers.models import WordPiece
    from tokenizers.normalizers import BertNormalizer
    from tokenizers.pre_tokenizers import BertPreTokenizer
    from tokenizers.processors import TemplateProcessing
    from transformers import PreTrainedTokenizerFast

    vocab = {token: i for i, token in enumerate(VOCAB)}
    inner = Tokenizer(WordPiece(vocab, unk_token="[UNK]"))
    inner.normalizer = BertNormalizer(lowercase=True)
    inner.pre_tokenizer = BertPreTokenizer()
    inner.post_processor = TemplateProcessing(
        single="[CLS] $A [SEP]",
        pair="[CLS] $A [SEP] $B [SEP]",
        special_tokens=[("[CLS]", vocab["[CLS]"]), ("[SEP]", vocab["[SEP]"])],
    )
    return PreTrainedTokenizerFast(
        tokenizer_object=inner,
        unk_token="[UNK]",
        pad_token="[PAD]",
        cls_token="[CLS]",
        sep_token="[SEP]",
        mask_token="[MASK]",
    )


@pytest.fixture(scope="session")
def model_dir(tmp_path_factory):
    import torch
    from transformers import BertConfig, BertModel

    torch.manual_seed(0)
    config = BertConfig(
        vocab_size=len(VOCAB),
        hidden_size=HIDDEN,
        num_hidden_layers=DEPTH,
        num_attention_heads=4,
        intermediate_size=64,
        max_position_embeddings=64,
    )
    model = BertModel(config)
    out = tmp_path_factory.mktemp("tinybert") / "model"
    build_tokenizer().save_pretrained(out)
    model.save_pretrained(out)
    return str(out)


@pytest.fixture(scope="session")
def broken_model_dir(model_dir, tmp_path_factory):
    """Same model with an inf planted in layer 2's feed-forward, so
    layer 1 outputs stay finite and layers >= 2 do not."""
    import torch
    from transformers import AutoModel, AutoTokenizer

    model = AutoModel.from_pretrained(model_dir)
    with torch.no_grad():
        model.encoder.layer[1].output.dense.weight[0, 0] = float("inf")
    out = tmp_path_factory.mktemp("tinybert_broken") / "model"
    model.save_pretrained(out)
    AutoTokenizer.from_pretrained(model_dir).save_pretrained(out)
    return str(out)
