# モデル定義パッケージ 