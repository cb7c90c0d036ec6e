"""Application configuration using Pydantic Settings"""

from pydantic_settings import BaseSettings, SettingsConfigDict
from pathlib import Path
from dotenv import load_dotenv

# Explicitly load .env file
# Try loading from current directory or parent directory to handle different runtime contexts
env_path = Path(".env")
if not env_path.exists():
    env_path = Path("backend/.env")
if not env_path.exists():
    env_path = Path("../.env")

if env_path.exists():
    load_dotenv(dotenv_path=env_path)
else:
    load_dotenv()


class Settings(BaseSettings):
    """
    Process-wide settings loaded from environment variables.

    Only the default output directory comes from the environment; experiment
    parameters live in the run configuration file.
    """

    output_dir: str = "./runs"  # SENSORLENS_OUTPUT_DIR

    model_config = SettingsConfigDict(
        env_prefix="SENSORLENS_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore"
    )

    def get_output_path(self) -> Path:
        """Get output directory as Path object, create if doesn't exist"""
        path = Path(self.output_dir)
        path.mkdir(parents=True, exist_ok=True)
        return path


# Singleton instance
settings = Settings()
