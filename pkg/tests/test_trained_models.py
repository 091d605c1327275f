"""Properties of the desk-scale trained models (cached, see ``desk_models``)."""

import pytest

from cdlnet.evaluation import evaluate

pytestmark = pytest.mark.slow


@pytest.mark.parametrize("name,sigmas", [("fixed25", [25]), ("blind", [15, 25, 35]), ("adaptive", [15, 25, 35])])
def test_every_output_beats_its_noisy_input(desk_models, name, sigmas):
    rep = evaluate(desk_models.get(name).params, desk_models.heldout_images, sigmas, "gt", seed=21)
    assert len(rep.records) == len(sigmas) * len(desk_models.heldout)
    for r in rep.records:
        assert r["psnr"] >= r["psnr_noisy"], r


def test_ground_truth_sigma_beats_mad_at_low_noise(desk_models):
    params = desk_models.get("adaptive_wide").params
    images = desk_models.heldout_images
    gt = evaluate(params, images, [5], "gt", seed=5).mean_psnr()
    mad = evaluate(params, images, [5], "mad", seed=5).mean_psnr()
    print(f"sigma 5: gt {gt:.2f} dB, mad {mad:.2f} dB")
    assert gt >= mad


def test_numeric_and_pca_sigma_give_same_quality(desk_models):
    params = desk_models.get("adaptive_wide").params
    images = desk_models.heldout_images
    gt = evaluate(params, images, [25], "gt", seed=0)
    pca = evaluate(params, images, [25], "pca", seed=0)
    gaps = [abs(a["psnr"] - b["psnr"]) for a, b in zip(gt.records, pca.records)]
    print("per-image gaps (dB):", " ".join(f"{g:.3f}" for g in gaps))
    assert abs(gt.mean_psnr() - pca.mean_psnr()) <= 0.1


def test_adaptive_wins_at_unseen_noise_levels(desk_models):
    images = desk_models.heldout_images
    for sigma in (40, 50):
        ad = evaluate(desk_models.get("adaptive").params, images, [sigma], "gt", seed=3).mean_psnr()
        na = evaluate(desk_models.get("blind").params, images, [sigma], "gt", seed=3).mean_psnr()
        assert ad > na, (sigma, ad, na)
