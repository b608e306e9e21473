"""The four CLI subcommands end to end, in a scratch directory."""

import json
import os
import tempfile

from palmfl.cli import main

work = tempfile.mkdtemp(prefix="palmfl-demo-")
config = os.path.join(work, "config.json")
with open(config, "w") as fh:
    json.dump({"n_clients": 2, "identities_per_client": 8, "samples_per_identity": 4,
               "rounds": 3, "local_epochs": 1, "k": 2, "data_dir": os.path.join(work, "data")}, fh)

main(["gen-data", "--config", config])
for method in ("fedpalm", "fedavg"):
    main(["train", "--config", config, "--method", method, "--out", os.path.join(work, method)])
    print(sorted(os.listdir(os.path.join(work, method, "checkpoints"))))
main(["eval", os.path.join(work, "fedpalm")])
main(["ablate-k", "--config", config, "--k", "1", "--k", "2", "--out", os.path.join(work, "ablation")])
print("artifacts under", work)
