import numpy as np


class Adam:
    """Adam over one flat parameter vector. Moments persist across rounds."""

    def __init__(self, size, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def direction(self, grad):
        """Bias-corrected step direction for ``grad`` without mutating state."""
        t = self.t + 1
        m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = m / (1.0 - self.beta1**t)
        v_hat = v / (1.0 - self.beta2**t)
        return m_hat / (np.sqrt(v_hat) + self.eps)

    def step(self, params, grad):
        """Update the flat array ``params`` in place."""
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        params -= self.lr * (m_hat / (np.sqrt(v_hat) + self.eps))
