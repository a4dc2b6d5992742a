"""
Logging configuration for the damrs pipeline
"""

import logging
import os
from datetime import datetime
from typing import Optional

_configured = False


def setup_logging(level: Optional[str] = None):
    """Configure logging for the application"""
    global _configured
    if _configured:
        return

    # Create logs directory if it doesn't exist
    log_dir = os.getenv("DAMRS_LOG_DIR", "logs")
    os.makedirs(log_dir, exist_ok=True)

    # Configure root logger
    log_level = (level or os.getenv("LOG_LEVEL", "INFO")).upper()
    logging.basicConfig(
        level=getattr(logging, log_level, logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(os.path.join(log_dir, f"damrs_{datetime.now().strftime('%Y%m%d')}.log")),
            logging.StreamHandler()
        ]
    )

    # Set specific logger levels
    logging.getLogger("torch").setLevel(logging.WARNING)

    _configured = True
    logger = logging.getLogger(__name__)
    logger.info("Logging configuration completed")
