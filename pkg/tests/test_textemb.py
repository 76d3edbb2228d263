import numpy as np
import pytest

from attrcl.textemb import TextEncoder

WORDS = ["stripe", "pattern", "fill", "length", "hue", "color", "taper", "shape",
         "border", "width", "skirt", "boots", "neck", "design", "sleeve"]


@pytest.fixture(scope="module")
def enc():
    return TextEncoder()


def test_word_is_deterministic_and_unit(enc):
    a, b = enc.embed_word("skirt"), TextEncoder().embed_word("skirt")
    np.testing.assert_array_equal(a, b)
    assert a.shape == (512,)
    assert abs(np.linalg.norm(a) - 1.0) < 1e-6


def test_distinct_words_nearly_orthogonal(enc):
    vecs = [enc.embed_word(w) for w in WORDS]
    for i in range(len(vecs)):
        for j in range(i + 1, len(vecs)):
            assert abs(vecs[i] @ vecs[j]) < 0.5, (WORDS[i], WORDS[j])


def test_empty_word_rejected(enc):
    with pytest.raises(ValueError):
        enc.embed_word("")
    with pytest.raises(ValueError):
        enc.embed_attribute("-")


def test_attribute_is_sum_of_words(enc):
    v = enc.embed_attribute("skirt-length")
    np.testing.assert_array_equal(v.vector, enc.embed_word("skirt") + enc.embed_word("length"))
    assert v.attribute == "skirt-length"
    np.testing.assert_array_equal(enc.embed_attribute("boots").vector, enc.embed_word("boots"))
    three = enc.embed_attribute("neck line design").vector
    np.testing.assert_allclose(three, sum(enc.embed_word(w) for w in ("neck", "line", "design")),
                               atol=1e-15)


def test_attribute_linear_in_word_lists(enc):
    ab = enc.embed_attribute("a-b").vector
    cd = enc.embed_attribute("c d").vector
    np.testing.assert_allclose(enc.embed_attribute("a-b-c-d").vector, ab + cd, atol=1e-15)


def test_provider_is_frozen(enc):
    v = enc.embed_word("hue")
    v[:] = 0.0
    assert np.linalg.norm(enc.embed_word("hue")) == pytest.approx(1.0)


def test_import_vectors(tmp_path):
    path = tmp_path / "vec.txt"
    path.write_text("skirt 1 0 0 0\nlength 0 2 0 0\n")
    enc = TextEncoder.from_file(path, dim=4)
    np.testing.assert_array_equal(enc.embed_attribute("skirt-length").vector, [1, 2, 0, 0])
    # words missing from the file fall back to hashed vectors
    assert enc.embed_word("other").shape == (4,)
    bad = tmp_path / "bad.txt"
    bad.write_text("skirt 1 0 0\n")
    with pytest.raises(ValueError, match=":1"):
        TextEncoder.from_file(bad, dim=4)
    with pytest.raises(ValueError):
        TextEncoder(4, {"w": np.ones(3)})
