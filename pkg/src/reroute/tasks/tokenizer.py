"""Fixed character-level vocabulary. Index = position in ``ALPHABET``."""

ALPHABET = "$0123456789abcdefghijklmnopqrstuvwxyzACKQRS:;=+|,?"
EOS = "$"
EOS_ID = 0
VOCAB_SIZE = len(ALPHABET)

_INDEX = {ch: i for i, ch in enumerate(ALPHABET)}


class EncodingError(ValueError):
    """Character outside the vocabulary."""


def tokenize(text: str) -> list[int]:
    try:
        return [_INDEX[ch] for ch in text]
    except KeyError as exc:
        raise EncodingError(f"character {exc.args[0]!r} is not in the vocabulary") from None


def detokenize(ids) -> str:
    out = []
    for i in ids:
        i = int(i)
        if not 0 <= i < VOCAB_SIZE:
            raise EncodingError(f"token id {i} outside [0, {VOCAB_SIZE})")
        out.append(ALPHABET[i])
    return "".join(out)


def vocabulary_table() -> list[tuple[int, str]]:
    return list(enumerate(ALPHABET))
