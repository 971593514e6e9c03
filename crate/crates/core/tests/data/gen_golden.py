"""Regenerates golden_mel.csv / golden_mfcc.csv with numpy.

Independent of the Rust code: periodic Hann frames of 1000 samples, hop 250,
1024-point rfft power, Slaney mel filters (24 bands, 0-4000 Hz, area
normalized), log(p + 1e-10) and an orthonormal DCT-II.
"""
import numpy as np

SR, N_FFT, WIN, HOP, N_MELS = 8000, 1024, 1000, 250, 24


def hz_to_mel(f):
    f = np.asarray(f, dtype=np.float64)
    f_sp, min_log_hz = 200.0 / 3, 1000.0
    min_log_mel, logstep = min_log_hz / f_sp, np.log(6.4) / 27.0
    return np.where(f >= min_log_hz, min_log_mel + np.log(np.maximum(f, 1e-12) / min_log_hz) / logstep, f / f_sp)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp, min_log_hz = 200.0 / 3, 1000.0
    min_log_mel, logstep = min_log_hz / f_sp, np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


def mel_filters():
    fft_freqs = np.arange(N_FFT // 2 + 1) * SR / N_FFT
    pts = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(4000.0), N_MELS + 2))
    fdiff = np.diff(pts)
    ramps = pts[:, None] - fft_freqs[None, :]
    w = np.zeros((N_MELS, fft_freqs.size))
    for i in range(N_MELS):
        lower = -ramps[i] / fdiff[i]
        upper = ramps[i + 2] / fdiff[i + 1]
        w[i] = np.maximum(0, np.minimum(lower, upper))
    return w * (2.0 / (pts[2:] - pts[:-2]))[:, None]


def signal():
    n = np.arange(SR, dtype=np.float64)
    x = (0.5 * np.sin(2 * np.pi * 1000 * n / SR)
         + 0.25 * np.sin(2 * np.pi * 2500 * n / SR + 0.3)
         + 0.1 * np.sin(2 * np.pi * 310 * n / SR))
    return x.astype(np.float32).astype(np.float64)


def main():
    x = signal()
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(WIN) / WIN)
    frames = np.stack([x[t * HOP:t * HOP + WIN] * window for t in range(1 + (SR - WIN) // HOP)])
    power = np.abs(np.fft.rfft(frames, n=N_FFT)) ** 2
    mel = power @ mel_filters().T
    logs = np.log(mel + 1e-10)
    k = np.arange(N_MELS)[:, None]
    i = np.arange(N_MELS)[None, :]
    dct = np.cos(np.pi * k * (2 * i + 1) / (2 * N_MELS)) * np.sqrt(2.0 / N_MELS)
    dct[0] /= np.sqrt(2.0)
    mfcc = logs @ dct.T
    for name, m in (("golden_mel.csv", mel), ("golden_mfcc.csv", mfcc)):
        np.savetxt(name, m, delimiter=",", fmt="%.9e")


if __name__ == "__main__":
    main()
