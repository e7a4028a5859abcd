import requests
import time
import logging
from typing import Dict, Optional, Tuple
from config import Config

USER_AGENT = f'RydbergBench/{Config.TOOL_VERSION}'


class RunNotifier:
    def __init__(self, webhook_url: Optional[str] = None, timeout: Optional[int] = None,
                 max_retries: Optional[int] = None):
        self.logger = logging.getLogger(__name__)
        self.webhook_url = webhook_url if webhook_url is not None else Config.NOTIFY_WEBHOOK_URL
        self.timeout = timeout or Config.NOTIFY_TIMEOUT
        self.max_retries = Config.NOTIFY_RETRY_ATTEMPTS if max_retries is None else max_retries

    @property
    def enabled(self) -> bool:
        return bool(self.webhook_url)

    def send_summary(self, summary: Dict) -> Tuple[bool, Optional[str]]:
        """
        POST a run summary to the configured webhook

        Returns:
            tuple: (success: bool, detail: Optional[str])
        """
        if not self.enabled:
            return False, "disabled"

        headers = {
            'Content-Type': 'application/json',
            'User-Agent': USER_AGENT
        }

        for attempt in range(self.max_retries + 1):
            try:
                self.logger.info(f"Sending run summary (attempt {attempt + 1}/{self.max_retries + 1})")
                response = requests.post(
                    self.webhook_url,
                    json=summary,
                    headers=headers,
                    timeout=self.timeout
                )

                if 200 <= response.status_code < 300:
                    self.logger.info("Run summary delivered")
                    return True, response.text
                self.logger.warning(f"Webhook returned status {response.status_code}: {response.text}")
                detail = f"HTTP {response.status_code}: {response.text}"

            except requests.exceptions.Timeout:
                self.logger.warning(f"Webhook request timed out (attempt {attempt + 1})")
                detail = "Request timeout"

            except requests.exceptions.ConnectionError as e:
                self.logger.warning(f"Connection error to webhook (attempt {attempt + 1}): {e}")
                detail = f"Connection error: {str(e)}"

            except requests.exceptions.RequestException as e:
                self.logger.error(f"Request error to webhook (attempt {attempt + 1}): {e}")
                detail = f"Request error: {str(e)}"

            if attempt < self.max_retries:
                time.sleep(2 ** attempt)  # Exponential backoff
            else:
                return False, detail

        return False, "Max retries exceeded"
