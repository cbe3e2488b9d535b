import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from pvigcaps.data import (HAM_CLASSES, ArrayDataset, ManifestDataset, Sample, SplitSpec, augment, decode,
                           largest_remainder, load_manifest, preprocess, resize_bilinear, sample_rng,
                           stratified_split, stratified_split_indices, synth_dataset)
from pvigcaps.exceptions import (ContractError, DataError, DecodeError, MissingImageError, StratificationError,
                                 UnknownLabelError)

HAM_COUNTS = {"akiec": 327, "bcc": 514, "bkl": 1099, "df": 115, "mel": 1113, "nv": 6705, "vasc": 142}


def write_images(folder, ids, size=(12, 10), color=(128, 128, 128)):
    folder.mkdir(parents=True, exist_ok=True)
    for i in ids:
        Image.new("RGB", size, color).save(folder / f"{i}.png")


def test_three_row_manifest(tmp_path):
    (tmp_path / "meta.csv").write_text("lesion_id,image_id,dx\nL1,a,nv\nL2,b,MEL\nL3,c,bcc\n")
    write_images(tmp_path / "img" / "part1", ["a", "b"])
    write_images(tmp_path / "img" / "part2", ["c"])
    m = load_manifest(tmp_path / "meta.csv", tmp_path / "img")
    assert len(m) == 3
    assert m.labels.tolist() == [HAM_CLASSES.index("NV"), HAM_CLASSES.index("MEL"), HAM_CLASSES.index("BCC")]
    assert m.records[2].path.parent.name == "part2"


def test_unknown_label_names_the_row(tmp_path):
    (tmp_path / "meta.csv").write_text("image_id,dx\na,nv\nb,xyz\n")
    with pytest.raises(UnknownLabelError, match=r"meta.csv:3"):
        load_manifest(tmp_path / "meta.csv", require_images=False)


def test_missing_images_all_listed(tmp_path):
    (tmp_path / "meta.csv").write_text("image_id,dx\na,nv\nb,nv\nc,df\n")
    write_images(tmp_path / "img", ["b"])
    with pytest.raises(MissingImageError) as info:
        load_manifest(tmp_path / "meta.csv", tmp_path / "img")
    assert info.value.missing == ["a", "c"]


def test_bad_header_and_missing_file(tmp_path):
    (tmp_path / "meta.csv").write_text("name,class\na,nv\n")
    with pytest.raises(DataError):
        load_manifest(tmp_path / "meta.csv", require_images=False)
    with pytest.raises(DataError):
        load_manifest(tmp_path / "nothing.csv")


def test_full_size_class_distribution(tmp_path):
    rows = ["image_id\tdx"]
    n = 0
    for label, count in HAM_COUNTS.items():
        for _ in range(count):
            rows.append(f"ISIC_{n:07d}\t{label}")
            n += 1
    (tmp_path / "meta.tsv").write_text("\n".join(rows) + "\n")
    m = load_manifest(tmp_path / "meta.tsv", require_images=False)
    assert len(m) == 10015
    assert m.counts == {k.upper(): v for k, v in HAM_COUNTS.items()}
    assert abs(m.counts["NV"] / len(m) - 0.669) < 0.001


def test_decode_errors():
    with pytest.raises(DecodeError):
        decode(b"not an image")
    with pytest.raises(DecodeError):
        decode(np.zeros((4, 4, 2)))


def test_constant_gray_normalises_to_zero():
    out = preprocess(Image.new("RGB", (40, 30), (0, 0, 0)), 32)
    assert out.shape == (3, 32, 32) and np.all(out == -1.0)
    gray = np.full((20, 20, 3), 0.5)
    assert np.all(preprocess(gray, 256) == 0.0)
    assert preprocess(gray).shape == (3, 256, 256)


def _bilinear_oracle(img, oh, ow):
    ih, iw = img.shape[:2]
    out = np.zeros((oh, ow) + img.shape[2:])
    for y in range(oh):
        for x in range(ow):
            sy = min(max((y + 0.5) * ih / oh - 0.5, 0.0), ih - 1)
            sx = min(max((x + 0.5) * iw / ow - 0.5, 0.0), iw - 1)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, ih - 1), min(x0 + 1, iw - 1)
            fy, fx = sy - y0, sx - x0
            out[y, x] = ((1 - fy) * ((1 - fx) * img[y0, x0] + fx * img[y0, x1])
                         + fy * ((1 - fx) * img[y1, x0] + fx * img[y1, x1]))
    return out


def test_checkerboard_upscale():
    board = np.array([[0.0, 1.0], [1.0, 0.0]])[..., None]
    out = resize_bilinear(board, 4, 4)[..., 0]
    # source coords -0.25 (clamped to 0), 0.25, 0.75, 1.25 (clamped to 1)
    expected = np.array([[0, .25, .75, 1], [.25, .375, .625, .75], [.75, .625, .375, .25], [1, .75, .25, 0]])
    np.testing.assert_allclose(out, expected, atol=1e-15)
    np.testing.assert_allclose(out, _bilinear_oracle(board, 4, 4)[..., 0], atol=1e-15)


def test_resize_matches_oracle_on_random_sizes(rng):
    img = rng.random((7, 11, 3))
    for oh, ow in [(3, 5), (16, 9), (7, 11)]:
        np.testing.assert_allclose(resize_bilinear(img, oh, ow), _bilinear_oracle(img, oh, ow), atol=1e-13)


def test_forced_double_flip_is_identity(rng):
    s = Sample(rng.normal(size=(3, 16, 16)), 0, "x")
    r = np.random.default_rng(0)
    once = augment(s, r, True, True)
    # undo the flips and compare with an unflipped crop from the same draws
    plain = augment(s, np.random.default_rng(0), False, False)
    np.testing.assert_array_equal(once.image[:, ::-1, ::-1], plain.image)


def test_augment_is_deterministic_per_stream():
    s = Sample(np.random.default_rng(1).normal(size=(3, 16, 16)), 0, "img-7")
    a = augment(s, sample_rng(3, 2, s.id))
    b = augment(s, sample_rng(3, 2, s.id))
    np.testing.assert_array_equal(a.image, b.image)


def test_crop_offsets_within_bounds():
    S = 8
    img = np.arange(3 * S * S, dtype=float).reshape(3, S, S)
    padded = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="edge")
    crops = {(oy, ox): padded[:, oy:oy + S, ox:ox + S] for oy in range(3) for ox in range(3)}
    rng = np.random.default_rng(0)
    seen = set()
    for _ in range(10_000):
        out = augment(Sample(img, 0, "s"), rng, False, False).image
        hits = [k for k, c in crops.items() if np.array_equal(c, out)]
        assert hits, "crop does not come from an offset in [0, S/4]"
        seen.update(hits)
    assert seen == set(crops)


def test_largest_remainder():
    assert largest_remainder(100, (0.8, 0.1, 0.1)) == [80, 10, 10]
    assert sum(largest_remainder(37, (0.8, 0.1, 0.1))) == 37


def test_single_class_split():
    tr, va, te = stratified_split_indices(np.zeros(100, dtype=int), SplitSpec())
    assert (len(tr), len(va), len(te)) == (80, 10, 10)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(3, 40), min_size=1, max_size=6), st.integers(0, 1000))
def test_split_is_a_stratified_partition(sizes, seed):
    labels = np.concatenate([np.full(n, k) for k, n in enumerate(sizes)])
    labels = labels[np.random.default_rng(seed).permutation(len(labels))]
    spec = SplitSpec((0.7, 0.2, 0.1), seed)
    parts = stratified_split_indices(labels, spec)
    flat = sorted(i for p in parts for i in p)
    assert flat == list(range(len(labels)))
    for k, n in enumerate(sizes):
        for part, frac in zip(parts, spec.fractions):
            assert abs(np.sum(labels[part] == k) - n * frac) < 1


def test_split_errors():
    with pytest.raises(StratificationError):
        stratified_split_indices(np.array([0, 0, 0, 1, 1]), SplitSpec())
    with pytest.raises(ContractError):
        SplitSpec((0.5, 0.5, 0.5))


def test_split_is_seeded():
    labels = np.repeat(np.arange(3), 10)
    a = stratified_split_indices(labels, SplitSpec(seed=4))
    assert a == stratified_split_indices(labels, SplitSpec(seed=4))
    assert a != stratified_split_indices(labels, SplitSpec(seed=5))


def test_synthetic_dataset_properties():
    d = synth_dataset(2, 20, 32, seed=0)
    assert len(d) == 40 and np.bincount(d.labels).tolist() == [20, 20]
    assert d.images.shape == (40, 3, 32, 32)
    again = synth_dataset(2, 20, 32, seed=0)
    assert d.images.tobytes() == again.images.tobytes()


def test_nearest_centroid_separates_synthetic_classes():
    d = synth_dataset(3, 40, 32, seed=2)
    train, val, test = stratified_split(d, SplitSpec((0.5, 0.25, 0.25), 0))
    X = train.images.reshape(len(train), -1)
    centroids = np.stack([X[train.labels == k].mean(axis=0) for k in range(3)])
    held = np.concatenate([val.images, test.images]).reshape(-1, X.shape[1])
    y = np.concatenate([val.labels, test.labels])
    pred = np.argmin(((held[:, None] - centroids[None]) ** 2).sum(-1), axis=1)
    assert np.mean(pred == y) >= 0.9


def test_manifest_dataset_batches(tmp_path):
    (tmp_path / "meta.csv").write_text("image_id,dx\na,nv\nb,mel\nc,df\n")
    write_images(tmp_path / "img", ["a", "b", "c"], color=(255, 0, 0))
    ds = ManifestDataset(load_manifest(tmp_path / "meta.csv", tmp_path / "img"), 32)
    images, labels = ds.batch([2, 0])
    assert images.shape == (2, 3, 32, 32)
    assert labels.tolist() == [HAM_CLASSES.index("DF"), HAM_CLASSES.index("NV")]
    assert np.all(images[:, 0] == 1.0) and np.all(images[:, 1] == -1.0)
    assert len(ds.subset([1])) == 1


def test_array_dataset_validation():
    with pytest.raises(ContractError):
        ArrayDataset(np.zeros((3, 3, 4, 4)), np.zeros(2))
