import numpy as np
import pytest

from augsearch import autodiff as ad
from augsearch import data as dat
from augsearch.autodiff import Tape, Tensor


def toy_dataset(rng, n=40, classes=4):
    images = rng.uniform(0, 1, (n, 3, 8, 8))
    labels = np.arange(n) % classes
    return dat.LabeledDataset(images, labels.astype(np.int64), classes)


class TestSimpleContainer:
    def test_round_trip(self, tmp_path, rng):
        ds = toy_dataset(rng, n=2)
        path = str(tmp_path / "two.faug")
        dat.save_simple_container(path, ds)
        back = dat.load_simple_container(path)
        assert len(back) == 2
        assert back.class_count == 4
        np.testing.assert_array_equal(back.labels, ds.labels)
        # pixels survive up to the 8-bit quantization of the container
        assert np.abs(back.images - ds.images).max() <= 0.5 / 255 + 1e-12

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.faug"
        path.write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(ValueError, match="magic"):
            dat.load_simple_container(str(path))

    def test_truncated_file(self, tmp_path, rng):
        ds = toy_dataset(rng, n=3)
        path = tmp_path / "t.faug"
        dat.save_simple_container(str(path), ds)
        blob = path.read_bytes()
        path.write_bytes(blob[:-10])
        with pytest.raises(ValueError, match="truncated"):
            dat.load_simple_container(str(path))

    def test_label_out_of_range(self, tmp_path, rng):
        ds = toy_dataset(rng, n=2)
        path = tmp_path / "l.faug"
        dat.save_simple_container(str(path), ds)
        blob = bytearray(path.read_bytes())
        blob[24] = 200  # first record's label low byte
        path.write_bytes(bytes(blob))
        with pytest.raises(ValueError, match="range"):
            dat.load_simple_container(str(path))


class TestCifarBinary:
    def write_cifar(self, path, n, rng):
        rows = np.empty((n, 3073), dtype=np.uint8)
        rows[:, 0] = rng.integers(0, 10, n)
        rows[:, 1:] = rng.integers(0, 256, (n, 3072))
        rows.tofile(path)
        return rows

    def test_record_count_follows_file_size(self, tmp_path, rng):
        path = str(tmp_path / "c.bin")
        self.write_cifar(path, 7, rng)
        ds = dat.load_raw_dataset(path, "cifar-binary")
        assert len(ds) == 7
        assert ds.images.shape == (7, 3, 32, 32)

    def test_pixel_255_maps_to_one(self, tmp_path, rng):
        path = str(tmp_path / "c.bin")
        rows = self.write_cifar(path, 1, rng)
        rows[0, 1] = 255
        rows.tofile(path)
        ds = dat.load_raw_dataset(path, "cifar-binary")
        assert ds.images[0, 0, 0, 0] == 1.0

    def test_truncated_rejected(self, tmp_path, rng):
        path = tmp_path / "c.bin"
        self.write_cifar(str(path), 2, rng)
        path.write_bytes(path.read_bytes()[:-1])
        with pytest.raises(ValueError, match="truncated"):
            dat.load_raw_dataset(str(path), "cifar-binary")

    def test_bad_label_rejected(self, tmp_path, rng):
        path = str(tmp_path / "c.bin")
        rows = self.write_cifar(path, 2, rng)
        rows[1, 0] = 42
        rows.tofile(path)
        with pytest.raises(ValueError, match="label"):
            dat.load_raw_dataset(path, "cifar-binary")

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ValueError, match="format"):
            dat.load_raw_dataset(str(tmp_path), "tar")


class TestSplit:
    def test_balanced_halves(self, rng):
        ds = toy_dataset(rng, n=100, classes=2)
        train, val = dat.split_half(ds, 3)
        assert len(train) == 50 and len(val) == 50
        assert (train.labels == 0).sum() == 25
        assert (val.labels == 1).sum() == 25

    def test_disjoint(self, rng):
        images = rng.uniform(0, 1, (20, 1, 2, 2))
        ds = dat.LabeledDataset(images, (np.arange(20) % 2).astype(np.int64), 2)
        train, val = dat.split_half(ds, 1)
        train_keys = {img.tobytes() for img in train.images}
        val_keys = {img.tobytes() for img in val.images}
        assert not train_keys & val_keys

    def test_same_seed_same_split(self, rng):
        ds = toy_dataset(rng, n=60)
        a = dat.split_half(ds, 9)[0]
        b = dat.split_half(ds, 9)[0]
        np.testing.assert_array_equal(a.images, b.images)

    def test_ordered_halves_split_by_position(self, rng):
        ds = toy_dataset(rng, n=40, classes=2)
        ds.split = "ordered-halves"
        train, val = dat.split_half(ds, 5)
        np.testing.assert_array_equal(train.images, ds.images[:20])
        np.testing.assert_array_equal(val.images, ds.images[20:])

    def test_too_small(self):
        ds = dat.LabeledDataset(np.zeros((1, 1, 2, 2)), np.zeros(1, dtype=np.int64), 1)
        with pytest.raises(ValueError, match="small"):
            dat.split_half(ds, 0)


class TestSyntheticTask:
    def test_labels_balanced_exactly(self):
        ds = dat.synth_rotation_task(400, 3)
        counts = np.bincount(ds.labels)
        assert counts[0] == counts[1] == 200

    def test_deterministic_per_seed(self):
        a = dat.synth_rotation_task(200, 11)
        b = dat.synth_rotation_task(200, 11)
        np.testing.assert_array_equal(a.images, b.images)
        c = dat.synth_rotation_task(200, 12)
        assert not np.array_equal(a.images, c.images)

    def test_minimum_size(self):
        with pytest.raises(ValueError, match="200"):
            dat.synth_rotation_task(100, 0)

    def test_pixels_in_range_and_rgb(self):
        ds = dat.synth_rotation_task(200, 5)
        assert ds.images.shape == (200, 3, 32, 32)
        assert ds.images.min() >= 0 and ds.images.max() <= 1
        np.testing.assert_array_equal(ds.images[:, 0], ds.images[:, 1])


class TestClassifierAndLoss:
    def test_uniform_logits_loss_is_log_c(self):
        logits = Tensor(np.zeros((6, 10)))
        loss = dat.cross_entropy(logits, np.arange(6) % 10)
        assert abs(loss.item() - np.log(10)) < 1e-12

    def test_confident_correct_logits_near_zero_loss(self):
        logits = np.full((4, 3), -100.0)
        labels = np.array([0, 1, 2, 0])
        logits[np.arange(4), labels] = 100.0
        loss = dat.cross_entropy(Tensor(logits), labels)
        assert loss.item() < 1e-6

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="range"):
            dat.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))

    def test_cross_entropy_gradient_matches_finite_difference(self, rng):
        logits0 = rng.normal(size=(4, 3))
        labels = np.array([0, 2, 1, 2])

        def f(z):
            return float(dat.cross_entropy(Tensor(z), labels).item())

        lt = Tensor(logits0.copy(), requires_grad=True)
        with Tape() as tape:
            loss = dat.cross_entropy(lt, labels)
        grad = tape.backward(loss)[lt]
        h = 1e-6
        for idx in [(0, 0), (1, 2), (3, 1)]:
            up, dn = logits0.copy(), logits0.copy()
            up[idx] += h
            dn[idx] -= h
            fd = (f(up) - f(dn)) / (2 * h)
            assert abs(grad[idx] - fd) < 1e-6 * max(1.0, abs(fd))

    def test_forward_deterministic(self, rng):
        model = dat.TinyClassifier(in_shape=(3, 8, 8), classes=3, seed=2)
        x = rng.uniform(0, 1, (5, 3, 8, 8))
        a = model.forward(x).data
        b = model.forward(x).data
        np.testing.assert_array_equal(a, b)
        assert a.shape == (5, 3)

    def test_full_classifier_gradcheck(self, rng):
        model = dat.TinyClassifier(in_shape=(3, 8, 8), classes=2, seed=1, channels=(2, 3))
        x = rng.uniform(0, 1, (2, 3, 8, 8))
        labels = np.array([0, 1])
        with Tape() as tape:
            loss = dat.cross_entropy(model.forward(x), labels)
        grads = tape.backward(loss)
        h = 1e-5
        for p in model.params():
            g = grads[p]
            flat_idx = int(np.abs(g).argmax())
            idx = np.unravel_index(flat_idx, p.data.shape)
            orig = p.data[idx]
            p.data = p.data.copy()
            p.data[idx] = orig + h
            up = dat.cross_entropy(model.forward(x), labels).item()
            p.data[idx] = orig - h
            dn = dat.cross_entropy(model.forward(x), labels).item()
            p.data[idx] = orig
            fd = (up - dn) / (2 * h)
            if abs(fd) > 1e-8:
                assert abs(g[idx] - fd) < 1e-5 * max(1.0, abs(fd))

    def test_oracle_fixed_rotate_beats_baseline(self):
        # pre-registered oracle: random rotation augmentation on the
        # synthetic task must beat no augmentation by >= 5 points per seed
        from augsearch import bilevel as bl
        from augsearch import policy as pol
        from augsearch import rng as rngmod
        from augsearch import transforms as tfm

        ds = dat.synth_rotation_task(600, 7)
        train, val = dat.split_half(ds, 0)
        rot = tfm.spec_by_name("Rotate")
        for seed in (1, 2, 3):
            accs = {}
            for use_rotate in (False, True):
                model = dat.TinyClassifier(seed=seed, classes=2)
                opt = bl.SGD(model.params(), bl.SGDConfig())
                brng = rngmod.stream(seed, "oracle-b")
                arng = rngmod.stream(seed, "oracle-a")
                epochs, batch = 15, 32
                steps = len(train) // batch
                for ep in range(epochs):
                    order = brng.permutation(len(train))
                    for stp in range(steps):
                        idx = order[stp * batch : (stp + 1) * batch]
                        x = train.images[idx]
                        if use_rotate:
                            x = tfm.apply(rot, Tensor(x),
                                          Tensor(arng.uniform(0, 1, len(idx)))).data
                        with Tape() as tape:
                            loss = dat.cross_entropy(model.forward(x), train.labels[idx])
                        opt.step(tape.backward(loss),
                                 lr=bl._cosine_lr(bl.SGDConfig(), ep + stp / steps, epochs))
                accs[use_rotate] = dat.accuracy(model.forward(val.images).data, val.labels)
            assert accs[True] - accs[False] >= 0.05, (seed, accs)
