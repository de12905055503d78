import os

from dotenv import load_dotenv

# ---------- Load .env ----------
load_dotenv()


class Config:
    # Runtime defaults; algorithm parameters live in linkcluster.core.presets
    SEED = int(os.getenv("LINKCLUSTER_SEED", "42"))
    LOG_LEVEL = os.getenv("LINKCLUSTER_LOG_LEVEL", "INFO")
    DEFAULT_PRESET = os.getenv("LINKCLUSTER_PRESET", "synth")

    # kNN rows scored per matrix product; peak extra memory is KNN_BLOCK_SIZE x N
    KNN_BLOCK_SIZE = int(os.getenv("LINKCLUSTER_KNN_BLOCK_SIZE", "1024"))
    WORKERS = int(os.getenv("LINKCLUSTER_WORKERS", "1"))
    INFERENCE_BATCH_SIZE = int(os.getenv("LINKCLUSTER_INFERENCE_BATCH_SIZE", "4096"))
