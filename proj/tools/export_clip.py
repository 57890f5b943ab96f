"""Export an open_clip ViT-B-32 model as the TorchScript pair read by the `real` backend.

    python3 tools/export_clip.py --out weights/ --pretrained openai
    python3 tools/export_clip.py --out /tmp/clip-random --random-init   # offline, for tests

Writes visual.pt, textual.pt and bpe_simple_vocab_16e6.txt.gz into --out.
"""

import argparse
import os
import shutil
import sys

import torch


class Visual(torch.nn.Module):
    def __init__(self, model):
        super().__init__()
        self.model = model

    def forward(self, image):
        return self.model.encode_image(image)


class Textual(torch.nn.Module):
    def __init__(self, model):
        super().__init__()
        self.model = model

    def forward(self, tokens):
        return self.model.encode_text(tokens)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", required=True)
    ap.add_argument("--model", default="ViT-B-32")
    ap.add_argument("--pretrained", default="openai")
    ap.add_argument("--random-init", action="store_true", help="skip the weight download")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--force", action="store_true")
    args = ap.parse_args()

    import open_clip

    if os.path.exists(os.path.join(args.out, "visual.pt")) and not args.force:
        print(f"{args.out} already holds an export; pass --force", file=sys.stderr)
        return 1
    os.makedirs(args.out, exist_ok=True)

    torch.manual_seed(args.seed)
    pretrained = None if args.random_init else args.pretrained
    model = open_clip.create_model(args.model, pretrained=pretrained)
    model.eval()

    image = torch.rand(1, 3, 224, 224)
    tokens = open_clip.get_tokenizer(args.model)(["a photo of rain", "a clear photo"])
    with torch.no_grad():
        visual = torch.jit.trace(Visual(model), image)
        textual = torch.jit.trace(Textual(model), tokens)
    visual.save(os.path.join(args.out, "visual.pt"))
    textual.save(os.path.join(args.out, "textual.pt"))

    vocab = os.path.join(os.path.dirname(open_clip.__file__), "bpe_simple_vocab_16e6.txt.gz")
    shutil.copyfile(vocab, os.path.join(args.out, "bpe_simple_vocab_16e6.txt.gz"))
    print(f"exported {args.model} ({'random init' if pretrained is None else pretrained}) to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
