"""Compare autograd against central differences for every pooling mode on a float64 micro model."""
from percept.aggregation import ImagePool
from percept.model import check_model_gradients, micro_model

for mode in ("max", "avg", "cls", "tsp", "wmp"):
    model, batch = micro_model(ImagePool.parse(mode), seed=7)
    n = sum(p.numel() for p in model.parameters())
    err = check_model_gradients(model, batch, epsilon=1e-5, n_coords=200, seed=7)
    print(f"{mode}: {n} parameters, 200 sampled coordinates, max relative error {err:.2e}")
