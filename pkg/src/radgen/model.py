"""End-to-end report generation model.

Wires the patch extractor, anatomical alignment, and the transformer
encoder-decoder behind one object with a flat parameter namespace. The
token embedding table lives here because the decoder and the dictionary
encoder share it (one unified feature space).
"""

from __future__ import annotations

import numpy as np

from radgen import tensor as T
from radgen.alignment import AnatomicalAlignment
from radgen.corpus import BOS_ID, EOS_ID, Vocabulary, images_array
from radgen.dictionary import AnatomicalDictionary
from radgen.generator import Decoder, Encoder, beam_search, greedy_decode_batch
from radgen.layers import normal_param
from radgen.tensor import Tensor
from radgen.vision import PatchExtractor, add_patch_positions


class ReportModel:
    def __init__(self, cfg, vocab: Vocabulary, rng: np.random.Generator,
                 dictionary: AnatomicalDictionary | None = None):
        if dictionary is None:
            dict_file = cfg["model.dictionary_file"]
            dictionary = (
                AnatomicalDictionary.from_file(dict_file)
                if dict_file
                else AnatomicalDictionary.default()
            )
        self.cfg = cfg
        self.vocab = vocab
        self.dictionary = dictionary
        d = cfg["model.dim"]
        self.vision = PatchExtractor(cfg, rng)
        self.embed = normal_param(rng, (len(vocab), d))
        self.alignment = AnatomicalAlignment(cfg, vocab, dictionary, self.embed, rng)
        self.encoder = Encoder(cfg, rng)
        self.decoder = Decoder(cfg, len(vocab), self.embed, rng)
        self.patch_positions = cfg["model.patch_positions"]

    # forward passes ---------------------------------------------------

    def hyper_visual(self, images) -> Tensor:
        patches = self.vision.extract(images)
        patches = add_patch_positions(patches, self.patch_positions)
        return self.alignment.hyper_visual(patches)

    def encode(self, images) -> Tensor:
        return self.encoder(self.hyper_visual(images))

    def forward(self, images, prefix_ids: np.ndarray) -> Tensor:
        """Teacher-forced logits [B, T, V] for BOS-prefixed inputs."""
        return self.decoder(self.encode(images), prefix_ids)

    # decoding ----------------------------------------------------------

    def generate(self, samples, beam: int | None = None,
                 max_len: int | None = None) -> list[list[str]]:
        """Beam-decode a list of corpus samples into token lists."""
        beam = beam if beam is not None else self.cfg["decode.beam"]
        max_len = max_len if max_len is not None else self.cfg["decode.max_len"]
        alpha = self.cfg["decode.length_alpha"]
        with T.no_grad():
            z = self.encode(Tensor(images_array(samples)))
        out = []
        for i in range(len(samples)):
            zi = Tensor(z.data[i : i + 1])
            step_fn = lambda prefix: self.decoder.step(zi, prefix)
            best = beam_search(step_fn, BOS_ID, EOS_ID, beam, max_len, alpha)[0]
            ids = [t for t in best.generated if t != EOS_ID]
            out.append(self.vocab.decode(ids))
        return out

    def generate_greedy(self, samples, max_len: int | None = None) -> list[list[str]]:
        max_len = max_len if max_len is not None else self.cfg["decode.max_len"]
        with T.no_grad():
            z = self.encode(Tensor(images_array(samples)))
        rows = greedy_decode_batch(self.decoder, z, BOS_ID, EOS_ID, max_len)
        return [self.vocab.decode(row) for row in rows]

    # parameters ---------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        params = {"embed": self.embed}
        for name, p in self.vision.named_parameters():
            params[f"vision.{name}"] = p
        for name, p in self.alignment.named_parameters():
            params[f"alignment.{name}"] = p
        for name, p in self.encoder.named_parameters():
            params[f"encoder.{name}"] = p
        for name, p in self.decoder.named_parameters():
            params[f"decoder.{name}"] = p
        return params

    def parameter_groups(self) -> dict[str, dict[str, Tensor]]:
        """Exhaustive, disjoint split: the visual extractor vs the rest."""
        params = self.named_parameters()
        visual = {n: p for n, p in params.items() if n.startswith("vision.")}
        rest = {n: p for n, p in params.items() if not n.startswith("vision.")}
        return {"visual": visual, "rest": rest}

    def parameter_count(self) -> int:
        return sum(p.size for p in self.named_parameters().values())
